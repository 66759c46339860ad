use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn is_activation(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Softmax)
    }
}

/// One layer of a sequential network.
///
/// Dense weights are `[out, in]`; conv kernels are `[out_ch, in_ch, kh, kw]`
/// over `[ch, h, w]` inputs with valid padding.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f64> {
    Dense {
        weights: Tensor<T>,
        bias: Tensor<T>,
    },
    Conv2d {
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    Softmax,
}

impl<T: Scalar> Layer<T> {
    pub fn dense(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::InvalidModel(format!(
                "dense weights {:?} / bias {:?} are inconsistent",
                ws,
                bias.shape()
            )));
        }
        Ok(Layer::Dense { weights, bias })
    }

    pub fn conv2d(kernel: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || bias.shape() != [ks[0]] || stride == 0 {
            return Err(Error::InvalidModel(format!(
                "conv2d kernel {:?} / bias {:?} / stride {stride} are inconsistent",
                ks,
                bias.shape()
            )));
        }
        Ok(Layer::Conv2d { kernel, bias, stride })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2x2 => LayerKind::MaxPool2x2,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Err(Error::InvalidModel(format!(
                "{what} cannot accept input shape {input:?}"
            )))
        };
        match self {
            Layer::Dense { weights, .. } => {
                let ws = weights.shape();
                if input != [ws[1]] {
                    return bad("dense");
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2d { kernel, stride, .. } => {
                let ks = kernel.shape();
                if input.len() != 3 || input[0] != ks[1] || input[1] < ks[2] || input[2] < ks[3] {
                    return bad("conv2d");
                }
                Ok(vec![
                    ks[0],
                    (input[1] - ks[2]) / stride + 1,
                    (input[2] - ks[3]) / stride + 1,
                ])
            }
            Layer::MaxPool2x2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad("maxpool2x2");
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Softmax => {
                if input.len() != 1 {
                    return bad("softmax");
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
        }
    }

    /// Forward pass for one layer; `out_shape` comes from `output_shape`.
    pub(crate) fn forward(&self, x: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
        let xd = x.data();
        match self {
            Layer::Dense { weights, bias } => {
                let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
                let w = weights.data();
                let out = (0..rows)
                    .map(|r| {
                        let row = &w[r * cols..(r + 1) * cols];
                        row.iter().zip(xd).fold(bias.data()[r], |acc, (&a, &b)| acc + a * b)
                    })
                    .collect();
                Tensor::raw(out_shape.to_vec(), out)
            }
            Layer::Conv2d { kernel, bias, stride } => {
                let g = ConvGeom::new(x.shape(), kernel.shape(), *stride);
                let k = kernel.data();
                let mut out = vec![T::zero(); g.out_len()];
                for o in 0..g.oc {
                    for i in 0..g.oh {
                        for j in 0..g.ow {
                            let mut acc = bias.data()[o];
                            for c in 0..g.ic {
                                for u in 0..g.kh {
                                    let xrow = g.x_index(c, i * g.stride + u, j * g.stride);
                                    let krow = g.k_index(o, c, u, 0);
                                    for v in 0..g.kw {
                                        acc += k[krow + v] * xd[xrow + v];
                                    }
                                }
                            }
                            out[(o * g.oh + i) * g.ow + j] = acc;
                        }
                    }
                }
                Tensor::raw(out_shape.to_vec(), out)
            }
            Layer::Relu => Tensor::raw(
                out_shape.to_vec(),
                xd.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            ),
            Layer::MaxPool2x2 => {
                let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(ch * oh * ow);
                for c in 0..ch {
                    for i in 0..oh {
                        for j in 0..ow {
                            let idx = pool_argmax(xd, c, i, j, h, w);
                            out.push(xd[idx]);
                        }
                    }
                }
                Tensor::raw(out_shape.to_vec(), out)
            }
            Layer::Flatten => Tensor::raw(out_shape.to_vec(), xd.to_vec()),
            Layer::Softmax => Tensor::raw(out_shape.to_vec(), softmax(xd)),
        }
    }

    /// Propagates `gy = dL/dy` to `dL/dx`, accumulating parameter gradients
    /// into `pgrads` (same order as `params`) when given.
    pub(crate) fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, gy: &[T], pgrads: Option<&mut [Tensor<T>]>) -> Vec<T> {
        let xd = x.data();
        match self {
            Layer::Dense { weights, .. } => {
                let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
                let w = weights.data();
                if let Some(pg) = pgrads {
                    let (dw, db) = pg.split_at_mut(1);
                    let dw = dw[0].data_mut();
                    let db = db[0].data_mut();
                    for r in 0..rows {
                        let g = gy[r];
                        if g == T::zero() {
                            continue;
                        }
                        db[r] += g;
                        for (d, &xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(xd) {
                            *d += g * xv;
                        }
                    }
                }
                let mut gx = vec![T::zero(); cols];
                for r in 0..rows {
                    let g = gy[r];
                    if g == T::zero() {
                        continue;
                    }
                    for (d, &wv) in gx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                        *d += g * wv;
                    }
                }
                gx
            }
            Layer::Conv2d { kernel, stride, .. } => {
                let g = ConvGeom::new(x.shape(), kernel.shape(), *stride);
                let k = kernel.data();
                let mut gx = vec![T::zero(); xd.len()];
                let mut pg = pgrads;
                for o in 0..g.oc {
                    for i in 0..g.oh {
                        for j in 0..g.ow {
                            let go = gy[(o * g.oh + i) * g.ow + j];
                            if go == T::zero() {
                                continue;
                            }
                            if let Some(pg) = pg.as_deref_mut() {
                                pg[1].data_mut()[o] += go;
                            }
                            for c in 0..g.ic {
                                for u in 0..g.kh {
                                    let xrow = g.x_index(c, i * g.stride + u, j * g.stride);
                                    let krow = g.k_index(o, c, u, 0);
                                    for v in 0..g.kw {
                                        gx[xrow + v] += go * k[krow + v];
                                    }
                                    if let Some(pg) = pg.as_deref_mut() {
                                        let dk = pg[0].data_mut();
                                        for v in 0..g.kw {
                                            dk[krow + v] += go * xd[xrow + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            Layer::Relu => xd
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            Layer::MaxPool2x2 => {
                let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![T::zero(); xd.len()];
                for c in 0..ch {
                    for i in 0..oh {
                        for j in 0..ow {
                            let idx = pool_argmax(xd, c, i, j, h, w);
                            gx[idx] += gy[(c * oh + i) * ow + j];
                        }
                    }
                }
                gx
            }
            Layer::Flatten => gy.to_vec(),
            Layer::Softmax => {
                let p = y.data();
                let dot = p.iter().zip(gy).fold(T::zero(), |a, (&pv, &g)| a + pv * g);
                p.iter().zip(gy).map(|(&pv, &g)| pv * (g - dot)).collect()
            }
        }
    }
}

pub(crate) fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax(z)[i]`, computed without forming the probabilities.
pub(crate) fn log_softmax_at<T: Scalar>(z: &[T], i: usize) -> T {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z[i] - lse
}

#[inline]
fn pool_argmax<T: Scalar>(xd: &[T], c: usize, i: usize, j: usize, h: usize, w: usize) -> usize {
    let base = c * h * w;
    let cands = [
        base + (2 * i) * w + 2 * j,
        base + (2 * i) * w + 2 * j + 1,
        base + (2 * i + 1) * w + 2 * j,
        base + (2 * i + 1) * w + 2 * j + 1,
    ];
    let mut best = cands[0];
    for &idx in &cands[1..] {
        if xd[idx] > xd[best] {
            best = idx;
        }
    }
    best
}

struct ConvGeom {
    ic: usize,
    ih: usize,
    iw: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize) -> Self {
        ConvGeom {
            ic: xs[0],
            ih: xs[1],
            iw: xs[2],
            oc: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (xs[1] - ks[2]) / stride + 1,
            ow: (xs[2] - ks[3]) / stride + 1,
            stride,
        }
    }

    fn out_len(&self) -> usize {
        self.oc * self.oh * self.ow
    }

    #[inline]
    fn x_index(&self, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(r < self.ih && col < self.iw);
        (c * self.ih + r) * self.iw + col
    }

    #[inline]
    fn k_index(&self, o: usize, c: usize, u: usize, v: usize) -> usize {
        ((o * self.ic + c) * self.kh + u) * self.kw + v
    }
}
