use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layer::{log_softmax_at, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a traced layer's outputs live inside the flat neuron vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceSegment {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// Post-activation snapshot of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T = f64> {
    pub values: Vec<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn prediction(&self) -> usize {
        self.output.argmax()
    }
}

/// Gradients for every layer parameter, in `Layer::params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T = f64> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        ParamGrads {
            layers: model
                .layers()
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.iter_mut().zip(b) {
                for (x, &y) in ta.data_mut().iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
        }
    }
}

/// A sequential network with a fixed input shape and a fixed neuron layout.
///
/// A layer is traced (its outputs count as neurons) when it is an
/// activation, a pooling layer, or a dense/conv layer that is not directly
/// followed by an activation. Flatten is never traced.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f64> {
    arch_name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
    layout: Vec<TraceSegment>,
    num_neurons: usize,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch_name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("bad input shape {input_shape:?}")));
        }
        if layers.last().map(Layer::kind) == Some(LayerKind::Flatten) {
            return Err(Error::InvalidModel("flatten cannot be the final layer".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for layer in &layers {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        let mut layout = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let traced = match layer.kind() {
                LayerKind::Flatten => false,
                LayerKind::Dense | LayerKind::Conv2d => {
                    !layers.get(i + 1).is_some_and(|next| next.kind().is_activation())
                }
                _ => true,
            };
            if traced {
                let len = shapes[i].iter().product();
                layout.push(TraceSegment { layer: i, offset, len });
                offset += len;
            }
        }
        Ok(Model {
            arch_name: arch_name.into(),
            input_shape,
            layers,
            shapes,
            layout,
            num_neurons: offset,
        })
    }

    /// `Flatten -> (Dense -> ReLU)* -> Dense -> Softmax` over `widths[0]` inputs.
    pub fn mlp(input_shape: Vec<usize>, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidModel("mlp needs at least input and output widths".into()));
        }
        if input_shape.iter().product::<usize>() != widths[0] {
            return Err(Error::InvalidModel(format!(
                "input shape {input_shape:?} does not flatten to {}",
                widths[0]
            )));
        }
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let mut layers = vec![Layer::Flatten];
        for (i, pair) in widths.windows(2).enumerate() {
            let last = i == widths.len() - 2;
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let sd = if last {
                (2.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            layers.push(Layer::dense(
                random_tensor(&[fan_out, fan_in], sd, &mut r),
                Tensor::zeros(&[fan_out]),
            )?);
            layers.push(if last { Layer::Softmax } else { Layer::Relu });
        }
        let name = format!(
            "mlp-{}",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
        );
        Model::new(name, input_shape, layers)
    }

    /// LeNet-1 style network for `[1, 28, 28]` inputs: 3,850 traced neurons.
    pub fn lenet1(seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let layers = vec![
            Layer::conv2d(
                random_tensor(&[4, 1, 5, 5], (2.0f64 / 25.0).sqrt(), &mut r),
                Tensor::zeros(&[4]),
                1,
            )?,
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::conv2d(
                random_tensor(&[12, 4, 5, 5], (2.0f64 / 100.0).sqrt(), &mut r),
                Tensor::zeros(&[12]),
                1,
            )?,
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::dense(
                random_tensor(&[10, 192], (2.0f64 / 202.0).sqrt(), &mut r),
                Tensor::zeros(&[10]),
            )?,
            Layer::Softmax,
        ];
        Model::new("lenet1", vec![1, 28, 28], layers)
    }

    pub fn arch_name(&self) -> &str {
        &self.arch_name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn num_neurons(&self) -> usize {
        self.num_neurons
    }

    pub fn trace_layout(&self) -> &[TraceSegment] {
        &self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(Tensor::len).sum()
    }

    /// Maps a neuron index to `(layer, offset within that layer's output)`.
    pub fn locate_neuron(&self, neuron: usize) -> Option<(usize, usize)> {
        self.layout
            .iter()
            .find(|s| neuron >= s.offset && neuron < s.offset + s.len)
            .map(|s| (s.layer, neuron - s.offset))
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Every layer's output, in order.
    fn activations(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(input)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let y = layer.forward(x, &self.shapes[i]);
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("output of layer {i} ({:?})", layer.kind())));
            }
            acts.push(y);
        }
        Ok(acts)
    }

    fn trace_from(&self, acts: &[Tensor<T>]) -> ActivationTrace<T> {
        let mut values = Vec::with_capacity(self.num_neurons);
        for seg in &self.layout {
            values.extend_from_slice(acts[seg.layer].data());
        }
        ActivationTrace {
            values,
            output: acts.last().cloned().expect("model has layers"),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<ActivationTrace<T>> {
        let acts = self.activations(input)?;
        Ok(self.trace_from(&acts))
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<usize> {
        Ok(self.activations(input)?.last().expect("model has layers").argmax())
    }

    /// Reverse sweep. `inject[i]` is added to dL/d(output of layer i).
    fn backprop(
        &self,
        input: &Tensor<T>,
        acts: &[Tensor<T>],
        mut inject: Vec<Option<Vec<T>>>,
        mut pgrads: Option<&mut ParamGrads<T>>,
    ) -> Vec<T> {
        let mut carried: Option<Vec<T>> = None;
        for i in (0..self.layers.len()).rev() {
            let g = match (carried.take(), inject[i].take()) {
                (None, None) => continue,
                (Some(g), None) | (None, Some(g)) => g,
                (Some(mut g), Some(extra)) => {
                    for (a, b) in g.iter_mut().zip(extra) {
                        *a += b;
                    }
                    g
                }
            };
            let x = if i == 0 { input } else { &acts[i - 1] };
            let pg = pgrads.as_deref_mut().map(|p| p.layers[i].as_mut_slice());
            carried = Some(self.layers[i].backward(x, &acts[i], &g, pg));
        }
        carried.unwrap_or_else(|| vec![T::zero(); input.len()])
    }

    /// Gradient of a scalar function of the trace with respect to the input.
    ///
    /// `objective` returns the value and its gradient with respect to
    /// `trace.values` (length `num_neurons`).
    pub fn input_gradient<F>(&self, input: &Tensor<T>, objective: F) -> Result<(T, Tensor<T>)>
    where
        F: FnOnce(&ActivationTrace<T>) -> (T, Vec<T>),
    {
        let acts = self.activations(input)?;
        let trace = self.trace_from(&acts);
        let (value, grad) = objective(&trace);
        if grad.len() != self.num_neurons {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_neurons],
                actual: vec![grad.len()],
            });
        }
        let mut inject: Vec<Option<Vec<T>>> = vec![None; self.layers.len()];
        for seg in &self.layout {
            let part = &grad[seg.offset..seg.offset + seg.len];
            if part.iter().any(|&g| g != T::zero()) {
                inject[seg.layer] = Some(part.to_vec());
            }
        }
        let gx = self.backprop(input, &acts, inject, None);
        Ok((value, Tensor::raw(self.input_shape.clone(), gx)))
    }

    fn require_softmax_head(&self) -> Result<()> {
        if self.layers.last().map(Layer::kind) != Some(LayerKind::Softmax) || self.layers.len() < 2 {
            return Err(Error::InvalidModel("cross-entropy needs a softmax final layer".into()));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        let num_classes = self.num_classes();
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(())
    }

    /// Cross-entropy of one example; the gradient enters below the softmax as
    /// `scale * (p - onehot)`.
    fn ce_backward(
        &self,
        input: &Tensor<T>,
        label: usize,
        scale: T,
        pgrads: Option<&mut ParamGrads<T>>,
    ) -> Result<(T, Vec<T>)> {
        self.check_label(label)?;
        let acts = self.activations(input)?;
        let last = self.layers.len() - 1;
        let logits = acts[last - 1].data();
        let loss = -log_softmax_at(logits, label);
        let mut g: Vec<T> = acts[last].data().iter().map(|&p| p * scale).collect();
        g[label] -= scale;
        let mut inject: Vec<Option<Vec<T>>> = vec![None; self.layers.len()];
        inject[last - 1] = Some(g);
        let gx = self.backprop(input, &acts, inject, pgrads);
        Ok((loss, gx))
    }

    /// `(CE(M(x), label), dCE/dx)`.
    pub fn loss_input_gradient(&self, input: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
        self.require_softmax_head()?;
        let (loss, gx) = self.ce_backward(input, label, T::one(), None)?;
        Ok((loss, Tensor::raw(self.input_shape.clone(), gx)))
    }

    /// Mean cross-entropy over a batch and its parameter gradients.
    pub fn param_gradients(&self, inputs: &[&Tensor<T>], labels: &[usize]) -> Result<(T, ParamGrads<T>)> {
        self.require_softmax_head()?;
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} inputs and {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let scale = T::one() / T::of(inputs.len() as f64);
        let parts: Vec<Result<(T, ParamGrads<T>)>> = inputs
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| {
                let mut pg = ParamGrads::zeros_like(self);
                let (loss, _) = self.ce_backward(x, y, scale, Some(&mut pg))?;
                Ok((loss, pg))
            })
            .collect();
        let mut total = ParamGrads::zeros_like(self);
        let mut loss = T::zero();
        for part in parts {
            let (l, pg) = part?;
            loss += l;
            total.add_assign(&pg);
        }
        Ok((loss * scale, total))
    }

    /// `param -= lr * grad` for every parameter.
    pub fn apply_gradients(&mut self, grads: &ParamGrads<T>, learning_rate: T) {
        for (layer, lg) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in layer.params_mut().into_iter().zip(lg) {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= learning_rate * d;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, bias } => Layer::Dense {
                    weights: weights.cast(),
                    bias: bias.cast(),
                },
                Layer::Conv2d { kernel, bias, stride } => Layer::Conv2d {
                    kernel: kernel.cast(),
                    bias: bias.cast(),
                    stride: *stride,
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool2x2 => Layer::MaxPool2x2,
                Layer::Flatten => Layer::Flatten,
                Layer::Softmax => Layer::Softmax,
            })
            .collect();
        Model {
            arch_name: self.arch_name.clone(),
            input_shape: self.input_shape.clone(),
            layers,
            shapes: self.shapes.clone(),
            layout: self.layout.clone(),
            num_neurons: self.num_neurons,
        }
    }
}

pub(crate) fn random_tensor<T: Scalar, R: Rng>(shape: &[usize], sd: f64, r: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let len = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..len).map(|_| T::of(normal.sample(r))).collect())
}
