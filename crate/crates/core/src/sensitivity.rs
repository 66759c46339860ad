//! Per-neuron sensitivity samples and fault detection.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTrace, Model};
use crate::error::{Error, Result};
use crate::perturb::PerturbSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Append-only per-neuron streams of `|N_j(perturbed) - N_j(clean)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityStore<T = f64> {
    samples: Vec<Vec<T>>,
    total_inputs_processed: usize,
}

impl<T: Scalar> SensitivityStore<T> {
    pub fn new(num_neurons: usize) -> Self {
        SensitivityStore {
            samples: vec![Vec::new(); num_neurons],
            total_inputs_processed: 0,
        }
    }

    pub fn num_neurons(&self) -> usize {
        self.samples.len()
    }

    pub fn total_inputs_processed(&self) -> usize {
        self.total_inputs_processed
    }

    pub fn is_empty(&self) -> bool {
        self.total_inputs_processed == 0
    }

    pub fn samples(&self, neuron: usize) -> &[T] {
        &self.samples[neuron]
    }

    /// Appends one diff vector (one value per neuron).
    pub fn push(&mut self, diff: &[T]) -> Result<()> {
        if diff.len() != self.samples.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.samples.len()],
                actual: vec![diff.len()],
            });
        }
        if diff.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "sensitivity values must be finite and >= 0".into(),
            ));
        }
        for (s, &v) in self.samples.iter_mut().zip(diff) {
            s.push(v);
        }
        self.total_inputs_processed += 1;
        Ok(())
    }

    /// Sample variance (n - 1 denominator) per neuron; 0 below two samples.
    pub fn variances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| sample_variance(s)).collect()
    }
}

/// Sample variance with the n - 1 denominator, 0 for fewer than two values.
pub fn sample_variance<T: Scalar>(xs: &[T]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let shift = xs[0].as_f64();
    let mean = shift + xs.iter().map(|v| v.as_f64() - shift).sum::<f64>() / n;
    xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// One detected fault: the model's prediction moved under perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub input_id: usize,
    /// Ground-truth label of the clean input.
    pub label: usize,
    pub spec: PerturbSpec,
    /// Actual L-inf distance between the faulty input and its clean input.
    pub linf: f64,
    pub clean_prediction: usize,
    pub perturbed_prediction: usize,
    pub iteration: usize,
    /// Index of the stored perturbed input in the campaign's fault blob.
    pub blob_index: usize,
}

impl FaultRecord {
    pub const CSV_HEADER: &'static str =
        "input_id,label,spec,linf,clean_prediction,perturbed_prediction,iteration,blob_index";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},\"{}\",{},{},{},{},{}",
            self.input_id,
            self.label,
            self.spec,
            self.linf,
            self.clean_prediction,
            self.perturbed_prediction,
            self.iteration,
            self.blob_index
        )
    }
}

/// Diff between two traces plus both predictions.
pub fn diff_traces<T: Scalar>(clean: &ActivationTrace<T>, perturbed: &ActivationTrace<T>) -> (Vec<T>, usize, usize) {
    let diff = clean
        .values
        .iter()
        .zip(&perturbed.values)
        .map(|(&a, &b)| (b - a).abs())
        .collect();
    (diff, clean.prediction(), perturbed.prediction())
}

pub fn sensitivity_of_pair<T: Scalar>(
    model: &Model<T>,
    clean: &Tensor<T>,
    perturbed: &Tensor<T>,
) -> Result<(Vec<T>, usize, usize)> {
    let a = model.forward(clean)?;
    let b = model.forward(perturbed)?;
    Ok(diff_traces(&a, &b))
}

/// One clean/perturbed pair queued for Phase 1.
#[derive(Debug, Clone)]
pub struct BatchItem<'a, T = f64> {
    pub input_id: usize,
    pub label: usize,
    pub clean: &'a Tensor<T>,
    /// Cached clean trace; recomputed when absent.
    pub clean_trace: Option<&'a ActivationTrace<T>>,
    pub perturbed: &'a Tensor<T>,
    pub spec: PerturbSpec,
}

/// Fault list that refuses duplicates on `(input_id, spec, iteration)`.
#[derive(Debug, Clone, Default)]
pub struct FaultLog<T = f64> {
    pub records: Vec<FaultRecord>,
    pub inputs: Vec<Tensor<T>>,
    seen: HashSet<(usize, u64, u8, usize)>,
}

impl<T: Scalar> FaultLog<T> {
    pub fn new() -> Self {
        FaultLog {
            records: Vec::new(),
            inputs: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Returns false if the same fault key was already recorded.
    pub fn insert(&mut self, mut record: FaultRecord, input: Tensor<T>) -> bool {
        let key = (
            record.input_id,
            record.spec.magnitude.to_bits(),
            record.spec.family as u8,
            record.iteration,
        );
        if !self.seen.insert(key) {
            return false;
        }
        record.blob_index = self.inputs.len();
        self.records.push(record);
        self.inputs.push(input);
        true
    }
}

/// Phase 1 over a batch: appends one diff vector per item to `store` (in item
/// order) and logs a fault whenever the argmax changed. Returns the number of
/// new faults.
pub fn process_batch<T: Scalar>(
    model: &Model<T>,
    items: &[BatchItem<'_, T>],
    iteration: usize,
    store: &mut SensitivityStore<T>,
    faults: &mut FaultLog<T>,
) -> Result<usize> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if store.num_neurons() != model.num_neurons() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.num_neurons()],
            actual: vec![store.num_neurons()],
        });
    }
    let results: Vec<Result<(Vec<T>, usize, usize)>> = items
        .par_iter()
        .map(|it| {
            let owned;
            let clean = match it.clean_trace {
                Some(t) => t,
                None => {
                    owned = model.forward(it.clean)?;
                    &owned
                }
            };
            let pert = model.forward(it.perturbed)?;
            Ok(diff_traces(clean, &pert))
        })
        .collect();
    let mut new_faults = 0;
    for (it, res) in items.iter().zip(results) {
        let (diff, clean_pred, pert_pred) = res?;
        store.push(&diff)?;
        if clean_pred != pert_pred {
            let record = FaultRecord {
                input_id: it.input_id,
                label: it.label,
                spec: it.spec,
                linf: it.clean.linf_distance(it.perturbed).as_f64(),
                clean_prediction: clean_pred,
                perturbed_prediction: pert_pred,
                iteration,
                blob_index: 0,
            };
            if faults.insert(record, it.perturbed.clone()) {
                new_faults += 1;
            }
        }
    }
    Ok(new_faults)
}
