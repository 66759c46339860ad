//! Neuron Coverage and k-multisection Neuron Coverage, with a
//! keep-if-coverage-grows input selection loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignResult, IterationSummary, Technique, Termination};
use crate::data::Dataset;
use crate::engine::{model_hash, ActivationTrace, Model, TraceSegment};
use crate::error::{Error, Result};
use crate::perturb::{perturb, Family, PerturbSpec};
use crate::rng::{self, TAG_MAGNITUDE, TAG_NOISE};
use crate::scalar::Scalar;
use crate::sensitivity::{diff_traces, FaultLog, FaultRecord};
use crate::tensor::Tensor;

pub const NC_THRESHOLD: f64 = 0.5;
pub const KMNC_SECTIONS: usize = 1000;

/// Per-neuron activation range over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmncProfile {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub sections: usize,
}

impl KmncProfile {
    pub fn new(low: Vec<f64>, high: Vec<f64>, sections: usize) -> Result<Self> {
        if sections == 0 {
            return Err(Error::InvalidArgument("KMNC needs k >= 1".into()));
        }
        if low.len() != high.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![low.len()],
                actual: vec![high.len()],
            });
        }
        if low.iter().zip(&high).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument(
                "profile needs low <= high for every neuron".into(),
            ));
        }
        Ok(KmncProfile { low, high, sections })
    }

    /// Min/max of every traced neuron over `data`.
    pub fn from_data<T: Scalar>(model: &Model<T>, data: &Dataset<T>, sections: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = model.num_neurons();
        let (low, high) = data
            .inputs
            .par_iter()
            .map(|x| {
                let t = model.forward(x)?;
                let v: Vec<f64> = t.values.iter().map(|a| a.as_f64()).collect();
                Ok::<_, Error>((v.clone(), v))
            })
            .try_reduce(
                || (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]),
                |(mut l1, mut h1), (l2, h2)| {
                    for i in 0..n {
                        l1[i] = l1[i].min(l2[i]);
                        h1[i] = h1[i].max(h2[i]);
                    }
                    Ok((l1, h1))
                },
            )?;
        KmncProfile::new(low, high, sections)
    }

    pub fn num_neurons(&self) -> usize {
        self.low.len()
    }

    /// Section hit by activation `a` of neuron `i`, if inside the profile range.
    pub fn section(&self, i: usize, a: f64) -> Option<usize> {
        let (lo, hi) = (self.low[i], self.high[i]);
        if a < lo || a > hi {
            return None;
        }
        if lo == hi {
            return (a == lo).then_some(0);
        }
        let s = (self.sections as f64 * (a - lo) / (hi - lo)).floor() as usize;
        Some(s.min(self.sections - 1))
    }
}

/// Min-max normalises every trace segment of one input; flat segments map to 0.
pub fn normalize_layers<T: Scalar>(values: &[T], layout: &[TraceSegment]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for seg in layout {
        let vals = &values[seg.offset..seg.offset + seg.len];
        let lo = vals.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
        let hi = vals.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (o, v) in out[seg.offset..seg.offset + seg.len].iter_mut().zip(vals) {
                *o = (v.as_f64() - lo) / (hi - lo);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcState {
    pub threshold: f64,
    layout: Vec<TraceSegment>,
    covered: Vec<bool>,
    count: usize,
}

impl NcState {
    pub fn new(layout: &[TraceSegment], threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!(
                "NC threshold must be in [0, 1], got {threshold}"
            )));
        }
        let n = layout.iter().map(|s| s.len).sum();
        Ok(NcState {
            threshold,
            layout: layout.to_vec(),
            covered: vec![false; n],
            count: 0,
        })
    }

    fn hits<T: Scalar>(&self, values: &[T]) -> Vec<usize> {
        normalize_layers(values, &self.layout)
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > self.threshold && !self.covered[i])
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmncState {
    pub profile: KmncProfile,
    covered: Vec<bool>,
    count: usize,
}

impl KmncState {
    pub fn new(profile: KmncProfile) -> Self {
        let cells = profile.num_neurons() * profile.sections;
        KmncState {
            profile,
            covered: vec![false; cells],
            count: 0,
        }
    }

    fn hits<T: Scalar>(&self, values: &[T]) -> Vec<usize> {
        let k = self.profile.sections;
        values
            .iter()
            .enumerate()
            .filter_map(|(i, a)| self.profile.section(i, a.as_f64()).map(|s| i * k + s))
            .filter(|&c| !self.covered[c])
            .collect()
    }
}

/// Coverage state of one baseline metric. The covered set only grows.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineState {
    Nc(NcState),
    Kmnc(KmncState),
}

impl BaselineState {
    pub fn for_model<T: Scalar>(model: &Model<T>, metric: &Metric, train: Option<&Dataset<T>>) -> Result<Self> {
        match *metric {
            Metric::Nc { threshold } => Ok(BaselineState::Nc(NcState::new(model.trace_layout(), threshold)?)),
            Metric::Kmnc { sections } => {
                let train =
                    train.ok_or_else(|| Error::InvalidArgument("KMNC needs training data for its profile".into()))?;
                Ok(BaselineState::Kmnc(KmncState::new(KmncProfile::from_data(
                    model, train, sections,
                )?)))
            }
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        let expected = match self {
            BaselineState::Nc(s) => s.covered.len(),
            BaselineState::Kmnc(s) => s.profile.num_neurons(),
        };
        if expected != n {
            return Err(Error::ShapeMismatch {
                expected: vec![expected],
                actual: vec![n],
            });
        }
        Ok(())
    }

    /// Number of items a trace would newly cover.
    pub fn gain<T: Scalar>(&self, trace: &ActivationTrace<T>) -> Result<usize> {
        self.check_len(trace.values.len())?;
        Ok(match self {
            BaselineState::Nc(s) => s.hits(&trace.values).len(),
            BaselineState::Kmnc(s) => s.hits(&trace.values).len(),
        })
    }

    /// Marks a trace's items covered; returns how many were new.
    pub fn update<T: Scalar>(&mut self, trace: &ActivationTrace<T>) -> Result<usize> {
        self.check_len(trace.values.len())?;
        let (hits, covered, count) = match self {
            BaselineState::Nc(s) => (s.hits(&trace.values), &mut s.covered, &mut s.count),
            BaselineState::Kmnc(s) => (s.hits(&trace.values), &mut s.covered, &mut s.count),
        };
        for &h in &hits {
            covered[h] = true;
        }
        *count += hits.len();
        Ok(hits.len())
    }

    pub fn covered_count(&self) -> usize {
        match self {
            BaselineState::Nc(s) => s.count,
            BaselineState::Kmnc(s) => s.count,
        }
    }

    pub fn capacity(&self) -> usize {
        match self {
            BaselineState::Nc(s) => s.covered.len(),
            BaselineState::Kmnc(s) => s.covered.len(),
        }
    }

    pub fn coverage(&self) -> f64 {
        if self.capacity() == 0 {
            return 0.0;
        }
        self.covered_count() as f64 / self.capacity() as f64
    }

    pub fn is_saturated(&self) -> bool {
        self.covered_count() == self.capacity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Metric {
    Nc { threshold: f64 },
    Kmnc { sections: usize },
}

impl Metric {
    pub fn nc() -> Self {
        Metric::Nc {
            threshold: NC_THRESHOLD,
        }
    }

    pub fn kmnc() -> Self {
        Metric::Kmnc {
            sections: KMNC_SECTIONS,
        }
    }

    pub fn technique(self) -> Technique {
        match self {
            Metric::Nc { threshold } => Technique::Nc { threshold },
            Metric::Kmnc { sections } => Technique::Kmnc { sections },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub metric: Metric,
    pub family: Family,
    /// Total perturbation attempts.
    pub max_attempts: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(metric: Metric, family: Family, seed: u64) -> Self {
        BaselineConfig {
            metric,
            family,
            max_attempts: 5000,
            seed,
        }
    }
}

const CHUNK: usize = 256;

/// Attempt `a` perturbs input `a % N` at one of the family's sweep magnitudes
/// (drawn uniformly) and keeps it iff the metric grows. Faults are recorded
/// for kept inputs only.
pub fn baseline_campaign<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    state: &mut BaselineState,
    cfg: &BaselineConfig,
) -> Result<CampaignResult<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    state.check_len(model.num_neurons())?;
    let sweep = cfg.family.sweep();
    let n = data.len();
    let mut faults = FaultLog::new();
    let mut iterations = Vec::new();
    let mut attempts = 0;
    while attempts < cfg.max_attempts && !state.is_saturated() {
        let end = (attempts + CHUNK).min(cfg.max_attempts);
        let batch: Vec<(PerturbSpec, Tensor<T>, ActivationTrace<T>, ActivationTrace<T>)> = (attempts..end)
            .into_par_iter()
            .map(|a| {
                let di = a % n;
                let pick = rng::stream(cfg.seed, &[TAG_MAGNITUDE, a as u64]).random_range(0..sweep.len());
                let spec = PerturbSpec::new(cfg.family, sweep[pick]);
                let mut noise = rng::stream(cfg.seed, &[TAG_NOISE, a as u64]);
                let x = perturb(&spec, model, &data.inputs[di], data.labels[di], &mut noise)?;
                let clean = model.forward(&data.inputs[di])?;
                let pert = model.forward(&x)?;
                Ok((spec, x, clean, pert))
            })
            .collect::<Result<_>>()?;
        let start = attempts;
        for (off, (spec, x, clean, pert)) in batch.into_iter().enumerate() {
            let a = start + off;
            attempts = a + 1;
            let gained = state.update(&pert)?;
            if gained == 0 {
                continue;
            }
            let (_, cp, pp) = diff_traces(&clean, &pert);
            let mut new_faults = 0;
            if cp != pp {
                let di = a % n;
                let rec = FaultRecord {
                    input_id: a,
                    label: data.labels[di],
                    spec,
                    linf: data.inputs[di].linf_distance(&x).as_f64(),
                    clean_prediction: cp,
                    perturbed_prediction: pp,
                    iteration: a,
                    blob_index: 0,
                };
                if faults.insert(rec, x) {
                    new_faults = 1;
                }
            }
            iterations.push(IterationSummary {
                iteration: a,
                inputs: 1,
                new_faults,
                total_faults: faults.len(),
                coverage: state.coverage(),
            });
            if state.is_saturated() {
                break;
            }
        }
    }
    Ok(CampaignResult {
        technique: cfg.metric.technique(),
        config: serde_json::to_value(cfg)?,
        model_hash: model_hash(model)?,
        iterations,
        reports: Vec::new(),
        faults: faults.records,
        fault_inputs: faults.inputs,
        inputs_generated: attempts,
        termination: if state.is_saturated() {
            Termination::CoverageReached
        } else {
            Termination::BudgetExhausted
        },
        timings: None,
    })
}
