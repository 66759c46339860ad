#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use senscov::engine::{Layer, LayerKind, Model};
use senscov::fuzzer::{objective, objective_gradient};
use senscov::rng::Stream;
use senscov::Tensor;

pub const H: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;

pub fn normal_tensor(r: &mut Stream, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_tensor(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dense(r: &mut Stream, out: usize, inp: usize) -> Layer {
    Layer::dense(normal_tensor(r, &[out, inp], 0.6), normal_tensor(r, &[out], 0.3)).unwrap()
}

fn conv(r: &mut Stream, oc: usize, ic: usize, k: usize, stride: usize) -> Layer {
    Layer::conv2d(
        normal_tensor(r, &[oc, ic, k, k], 0.4),
        normal_tensor(r, &[oc], 0.2),
        stride,
    )
    .unwrap()
}

/// A small random model that exercises `kind` and ends in a softmax head.
pub fn model_for(kind: LayerKind, r: &mut Stream) -> Model {
    let (shape, layers) = match kind {
        LayerKind::Dense => (vec![5], vec![dense(r, 4, 5), dense(r, 3, 4), Layer::Softmax]),
        LayerKind::Conv2d => {
            let stride = r.random_range(1..=2);
            let out = (7 - 3) / stride + 1;
            (
                vec![2, 7, 7],
                vec![
                    conv(r, 3, 2, 3, stride),
                    Layer::Flatten,
                    dense(r, 3, 3 * out * out),
                    Layer::Softmax,
                ],
            )
        }
        LayerKind::Relu => (
            vec![5],
            vec![dense(r, 6, 5), Layer::Relu, dense(r, 3, 6), Layer::Softmax],
        ),
        LayerKind::MaxPool2x2 => (
            vec![2, 6, 6],
            vec![
                conv(r, 2, 2, 3, 1),
                Layer::MaxPool2x2,
                Layer::Flatten,
                dense(r, 3, 8),
                Layer::Softmax,
            ],
        ),
        LayerKind::Flatten => (vec![2, 3, 3], vec![Layer::Flatten, dense(r, 3, 18), Layer::Softmax]),
        LayerKind::Softmax => (vec![4], vec![dense(r, 3, 4), Layer::Softmax]),
    };
    Model::new(format!("{kind:?}"), shape, layers).unwrap()
}

pub const ALL_KINDS: [LayerKind; 6] = [
    LayerKind::Dense,
    LayerKind::Conv2d,
    LayerKind::Relu,
    LayerKind::MaxPool2x2,
    LayerKind::Flatten,
    LayerKind::Softmax,
];

/// Output of `model.layers[..n]` for `x`.
fn prefix_output(model: &Model, n: usize, x: &Tensor) -> Tensor {
    if n == 0 {
        return x.clone();
    }
    let m = Model::new("prefix", model.input_shape().to_vec(), model.layers()[..n].to_vec()).unwrap();
    m.forward(x).unwrap().output
}

/// True when every ReLU input and every max-pool window is further than
/// `KINK_MARGIN` from a kink at `x`.
pub fn kink_free(model: &Model, x: &Tensor) -> bool {
    for (i, layer) in model.layers().iter().enumerate() {
        match layer.kind() {
            LayerKind::Relu => {
                if prefix_output(model, i, x).data().iter().any(|v| v.abs() <= KINK_MARGIN) {
                    return false;
                }
            }
            LayerKind::MaxPool2x2 => {
                let y = prefix_output(model, i, x);
                let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                for ch in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut win: Vec<f64> = (0..4)
                                .map(|k| y.data()[ch * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2])
                                .collect();
                            win.sort_by(|a, b| b.total_cmp(a));
                            if win[0] - win[1] <= KINK_MARGIN {
                                return false;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Input gradient of a random linear functional of the trace versus central
/// differences. Returns the largest elementwise relative error.
pub fn input_gradient_error(model: &Model, x: &Tensor, coeffs: &[f64]) -> f64 {
    let (_, g) = model
        .input_gradient(x, |t| {
            let v = t.values.iter().zip(coeffs).map(|(a, c)| a * c).sum();
            (v, coeffs.to_vec())
        })
        .unwrap();
    let f = |x: &Tensor| -> f64 {
        let t = model.forward(x).unwrap();
        t.values.iter().zip(coeffs).map(|(a, c)| a * c).sum()
    };
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += H;
            m.data_mut()[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect();
    max_rel(g.data(), &numeric)
}

fn mean_ce(model: &Model, xs: &[Tensor], ys: &[usize]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| -model.forward(x).unwrap().output.data()[y].ln())
        .sum::<f64>()
        / xs.len() as f64
}

/// Parameter gradients of mean cross-entropy versus central differences.
pub fn param_gradient_error(model: &Model, xs: &[Tensor], ys: &[usize]) -> f64 {
    let refs: Vec<&Tensor> = xs.iter().collect();
    let (loss, grads) = model.param_gradients(&refs, ys).unwrap();
    assert!(rel_err(loss, mean_ce(model, xs, ys)) < 1e-10);
    let mut worst = 0.0f64;
    for (li, layer) in model.layers().iter().enumerate() {
        for (pi, p) in layer.params().iter().enumerate() {
            for k in 0..p.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.layers_mut()[li].params_mut()[pi].data_mut()[k] += H;
                minus.layers_mut()[li].params_mut()[pi].data_mut()[k] -= H;
                let numeric = (mean_ce(&plus, xs, ys) - mean_ce(&minus, xs, ys)) / (2.0 * H);
                worst = worst.max(rel_err(grads.layers[li][pi].data()[k], numeric));
            }
        }
    }
    worst
}

/// Phase-3 objective gradient versus central differences. `None` when the
/// candidate sits within the kink margin of some |diff| term.
pub fn objective_gradient_error(model: &Model, clean: &Tensor, cand: &Tensor, neurons: &[usize]) -> Option<f64> {
    let ct = model.forward(clean).unwrap();
    let t = model.forward(cand).unwrap();
    if neurons
        .iter()
        .any(|&i| (t.values[i] - ct.values[i]).abs() <= KINK_MARGIN)
        || !kink_free(model, cand)
    {
        return None;
    }
    let (v, g) = objective_gradient(model, &ct, cand, neurons).unwrap();
    assert!(rel_err(v, objective(model, clean, cand, neurons).unwrap()) < 1e-12);
    let numeric: Vec<f64> = (0..cand.len())
        .map(|i| {
            let (mut p, mut m) = (cand.clone(), cand.clone());
            p.data_mut()[i] += H;
            m.data_mut()[i] -= H;
            (objective(model, clean, &p, neurons).unwrap() - objective(model, clean, &m, neurons).unwrap()) / (2.0 * H)
        })
        .collect();
    Some(max_rel(g.data(), &numeric))
}

/// Full sort, then 1-based positions ceil(j * n / k).
pub fn brute_force_sampler(variances: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..variances.len()).collect();
    ids.sort_by(|&a, &b| variances[a].partial_cmp(&variances[b]).unwrap().then(a.cmp(&b)));
    let n = ids.len();
    if n <= k {
        return ids;
    }
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<usize> = Vec::new();
    for j in 1..=k {
        let pos = ((j * n) as f64 / k as f64).ceil() as usize;
        let id = ids[pos.clamp(1, n) - 1];
        if seen.insert(id) {
            out.push(id);
        }
    }
    out
}
