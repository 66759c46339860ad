//! THM1 container: `b"THM1\n"`, a little-endian u32 manifest length, a UTF-8
//! JSON manifest, then every parameter as little-endian f64 in manifest
//! order. No padding anywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Layer, LayerKind};
use super::model::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"THM1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDesc {
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<ParamDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    arch_name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorManifest {
    tensors: Vec<ParamDesc>,
}

fn frame(manifest: &[u8], blobs: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest);
    for v in blobs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a THM1 buffer into its manifest bytes and decoded f64 payload.
fn unframe(bytes: &[u8], expected_values: impl FnOnce(&[u8]) -> Result<usize>) -> Result<(Vec<u8>, Vec<f64>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, expected THM1".into()));
    }
    let header = MAGIC.len() + 4;
    if bytes.len() < header {
        return Err(Error::Truncated {
            what: "THM1 header".into(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let len = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes")) as usize;
    if bytes.len() < header + len {
        return Err(Error::Truncated {
            what: "THM1 manifest".into(),
            expected: (header + len) as u64,
            actual: bytes.len() as u64,
        });
    }
    let manifest = bytes[header..header + len].to_vec();
    let count = expected_values(&manifest)?;
    let blob = &bytes[header + len..];
    let want = count * 8;
    if blob.len() < want {
        return Err(Error::Truncated {
            what: "THM1 parameter blob".into(),
            expected: (header + len + want) as u64,
            actual: bytes.len() as u64,
        });
    }
    if blob.len() > want {
        return Err(Error::Format(format!(
            "manifest describes {want} blob bytes but file carries {}",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("THM1 parameter blob".into()));
    }
    Ok((manifest, values))
}

fn param_names(kind: LayerKind) -> &'static [&'static str] {
    match kind {
        LayerKind::Dense => &["weights", "bias"],
        LayerKind::Conv2d => &["kernel", "bias"],
        _ => &[],
    }
}

pub fn model_to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let manifest = ModelManifest {
        arch_name: model.arch_name().to_string(),
        input_shape: model.input_shape().to_vec(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerDesc {
                kind: l.kind(),
                stride: match l {
                    Layer::Conv2d { stride, .. } => Some(*stride),
                    _ => None,
                },
                params: l
                    .params()
                    .iter()
                    .zip(param_names(l.kind()))
                    .map(|(p, name)| ParamDesc {
                        name: (*name).to_string(),
                        shape: p.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let blobs = model
        .layers()
        .iter()
        .flat_map(|l| l.params())
        .flat_map(|p| p.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>());
    Ok(frame(&json, blobs))
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut parsed: Option<ModelManifest> = None;
    let (_, values) = unframe(bytes, |m| {
        let man: ModelManifest = serde_json::from_slice(m)?;
        let count = man
            .layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        parsed = Some(man);
        Ok(count)
    })?;
    let man = parsed.expect("manifest parsed");
    let mut cursor = 0usize;
    let mut take = |desc: &ParamDesc| -> Result<Tensor<T>> {
        let n: usize = desc.shape.iter().product();
        let data = values[cursor..cursor + n].iter().map(|&v| T::of(v)).collect();
        cursor += n;
        Tensor::new(desc.shape.clone(), data)
    };
    let mut layers = Vec::with_capacity(man.layers.len());
    for desc in &man.layers {
        let expected = param_names(desc.kind);
        if desc.params.len() != expected.len() {
            return Err(Error::Format(format!(
                "{:?} layer needs {} parameter tensors, manifest lists {}",
                desc.kind,
                expected.len(),
                desc.params.len()
            )));
        }
        let layer = match desc.kind {
            LayerKind::Dense => Layer::dense(take(&desc.params[0])?, take(&desc.params[1])?)?,
            LayerKind::Conv2d => Layer::conv2d(
                take(&desc.params[0])?,
                take(&desc.params[1])?,
                desc.stride
                    .ok_or_else(|| Error::Format("conv2d layer without stride".into()))?,
            )?,
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool2x2 => Layer::MaxPool2x2,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    Model::new(man.arch_name, man.input_shape, layers)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    model_from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the model's THM1 encoding.
pub fn model_hash<T: Scalar>(model: &Model<T>) -> Result<String> {
    let digest = Sha256::digest(model_to_bytes(model)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// A list of tensors in the same container, manifest `{"tensors": [...]}`.
pub fn tensors_to_bytes<T: Scalar>(tensors: &[Tensor<T>]) -> Result<Vec<u8>> {
    let manifest = TensorManifest {
        tensors: tensors
            .iter()
            .enumerate()
            .map(|(i, t)| ParamDesc {
                name: i.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    Ok(frame(
        &json,
        tensors.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())),
    ))
}

pub fn tensors_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<T>>> {
    let mut parsed: Option<TensorManifest> = None;
    let (_, values) = unframe(bytes, |m| {
        let man: TensorManifest = serde_json::from_slice(m)?;
        let count = man.tensors.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        parsed = Some(man);
        Ok(count)
    })?;
    let mut cursor = 0;
    parsed
        .expect("manifest parsed")
        .tensors
        .into_iter()
        .map(|d| {
            let n: usize = d.shape.iter().product();
            let data = values[cursor..cursor + n].iter().map(|&v| T::of(v)).collect();
            cursor += n;
            Tensor::new(d.shape, data)
        })
        .collect()
}

pub fn save_tensors<T: Scalar>(tensors: &[Tensor<T>], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensors_to_bytes(tensors)?)?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Tensor<T>>> {
    tensors_from_bytes(&fs::read(path)?)
}
