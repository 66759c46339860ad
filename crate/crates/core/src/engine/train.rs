use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mini-batch SGD on mean cross-entropy. Returns a trained copy; the
/// shuffle order depends only on `cfg.seed` and the epoch.
pub fn sgd_train<T: Scalar>(model: &Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Model<T>> {
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model.clone();
    let lr = T::of(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[rng::TAG_TRAIN, epoch as u64]);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<_> = chunk.iter().map(|&i| &data.inputs[i]).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (_, grads) = model.param_gradients(&inputs, &labels)?;
            model.apply_gradients(&grads, lr);
        }
    }
    Ok(model)
}

/// Fraction of inputs whose argmax equals the label.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = data
        .inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| model.predict(x).map(|p| usize::from(p == y)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / data.len() as f64)
}
