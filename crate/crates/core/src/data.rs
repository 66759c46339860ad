//! Labeled datasets and the IDX / CSV loaders.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split: Split::default(),
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Items `[start, start + len)`, clipped to the dataset.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.len());
        let start = start.min(end);
        Dataset {
            inputs: self.inputs[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Appends another dataset with the same class count.
    pub fn extend(&mut self, other: &Dataset<T>) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidArgument("class counts differ".into()));
        }
        self.inputs.extend(other.inputs.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_header(bytes: &[u8], what: &str, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            what: format!("IDX {what} header"),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format(format!(
            "IDX {what} magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            what: format!("IDX {what} file"),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(shape)
}

/// Parses an IDX image/label pair. Pixels are scaled to `[0, 1]` by /255 and
/// each image becomes a `[1, rows, cols]` tensor.
pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let ishape = idx_header(images, "images", IDX_IMAGES, 3)?;
    let lshape = idx_header(labels, "labels", IDX_LABELS, 1)?;
    let (count, rows, cols) = (ishape[0], ishape[1], ishape[2]);
    if lshape[0] != count {
        return Err(Error::Format(format!(
            "image file has {count} items but label file has {}",
            lshape[0]
        )));
    }
    let pixels = rows * cols;
    let inputs = images[16..]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|px| {
            Tensor::raw(
                vec![1, rows, cols],
                px.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect(),
            )
        })
        .collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, num_classes)
}

pub fn load_idx<T: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<T>> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Loads the standard `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte`
/// pair from `dir` (`train` or `t10k`).
pub fn load_mnist_split<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    Ok(load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?
    .with_split(split))
}

/// Reads numeric CSV rows whose last column is the integer label. Feature
/// columns are min-max scaled to `[0, 1]`; constant columns become 0.
pub fn parse_csv<T: Scalar, R: std::io::Read>(reader: R, num_classes: usize, has_header: bool) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Format(format!(
                "row {}: need at least one feature and a label",
                line + 1
            )));
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Format(format!(
                    "row {} has {} columns, expected {w}",
                    line + 1,
                    rec.len()
                )))
            }
            _ => {}
        }
        let mut feats = Vec::with_capacity(rec.len() - 1);
        for (col, cell) in rec.iter().enumerate().take(rec.len() - 1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Format(format!("row {} column {}: `{cell}` is not numeric", line + 1, col + 1)))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("row {} column {}", line + 1, col + 1)));
            }
            feats.push(v);
        }
        let cell = &rec[rec.len() - 1];
        let label: usize = cell
            .parse()
            .map_err(|_| Error::Format(format!("row {}: label `{cell}` is not a class index", line + 1)))?;
        rows.push(feats);
        labels.push(label);
    }
    let nf = width.map_or(0, |w| w - 1);
    let mut lo = vec![f64::INFINITY; nf];
    let mut hi = vec![f64::NEG_INFINITY; nf];
    for r in &rows {
        for (j, &v) in r.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let inputs = rows
        .into_iter()
        .map(|r| {
            let scaled = r
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let range = hi[j] - lo[j];
                    T::of(if range > 0.0 { (v - lo[j]) / range } else { 0.0 })
                })
                .collect();
            Tensor::raw(vec![nf], scaled)
        })
        .collect();
    Dataset::new(inputs, labels, num_classes)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, num_classes: usize, has_header: bool) -> Result<Dataset<T>> {
    parse_csv(fs::File::open(path)?, num_classes, has_header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(count: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        im.extend_from_slice(&IDX_IMAGES.to_be_bytes());
        im.extend_from_slice(&count.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(pixels);
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        (im, lb)
    }

    #[test]
    fn idx_scales_pixels() {
        let (im, lb) = idx_pair(2, &[0, 255, 51, 0, 255, 255, 255, 255], &[3, 7]);
        let d: Dataset = parse_idx(&im, &lb).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs[0].shape(), &[1, 2, 2]);
        assert_eq!(d.inputs[0].data(), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(d.labels, vec![3, 7]);
    }

    #[test]
    fn idx_errors() {
        let (im, lb) = idx_pair(2, &[0; 8], &[1]);
        assert!(matches!(parse_idx::<f64>(&im, &lb), Err(Error::Format(_))));
        let (im, lb) = idx_pair(2, &[0; 7], &[1, 2]);
        match parse_idx::<f64>(&im, &lb) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!((expected, actual), (24, 23));
            }
            other => panic!("{other:?}"),
        }
        let (mut im, lb) = idx_pair(2, &[0; 8], &[1, 2]);
        im[3] = 0x01;
        assert!(matches!(parse_idx::<f64>(&im, &lb), Err(Error::Format(_))));
    }

    #[test]
    fn csv_scaling_and_errors() {
        let d: Dataset = parse_csv("1,5,0,1\n3,5,10,0\n".as_bytes(), 2, false).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs[0].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(d.inputs[1].data(), &[1.0, 0.0, 1.0]);
        assert_eq!(d.labels, vec![1, 0]);
        let h: Dataset = parse_csv("a,b,label\n1,2,0\n".as_bytes(), 1, true).unwrap();
        assert_eq!(h.len(), 1);
        assert!(matches!(
            parse_csv::<f64, _>("1,2,5\n".as_bytes(), 3, false),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
        assert!(parse_csv::<f64, _>("1,2,0\n1,0\n".as_bytes(), 2, false).is_err());
        assert!(parse_csv::<f64, _>("1,x,0\n".as_bytes(), 2, false).is_err());
    }
}
