//! Sensitivity-guided fuzzing: Phase 1 (sensitivity), Phase 2 (coverage),
//! Phase 3 (gradient ascent on unconverged neurons), repeated.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignResult, IterationSummary, PhaseTimings, Technique, Termination};
use crate::coverage::{coverage, sample_neurons, CoverageConfig};
use crate::data::Dataset;
use crate::engine::{model_hash, ActivationTrace, Model};
use crate::error::{Error, Result};
use crate::perturb::{perturb, project, Family, PerturbSpec};
use crate::rng::{self, TAG_ASCENT, TAG_MAGNITUDE, TAG_NOISE};
use crate::scalar::Scalar;
use crate::sensitivity::{process_batch, BatchItem, FaultLog, SensitivityStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    /// Family and PGD parameters; the magnitude is replaced per input.
    pub spec: PerturbSpec,
    /// Iteration-0 magnitudes are drawn uniformly from this range.
    pub magnitude_range: (f64, f64),
    /// L-inf radius that Phase 3 candidates are kept within.
    pub budget: f64,
    pub coverage_target: f64,
    pub max_iterations: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub coverage: CoverageConfig,
    /// Record wall-clock phase timings (makes output non-deterministic).
    pub record_timings: bool,
}

impl FuzzConfig {
    /// Defaults for a family: magnitudes span its sweep, budget is the sweep maximum.
    pub fn for_family(family: Family, seed: u64) -> Self {
        let (lo, hi) = family.sweep_range();
        FuzzConfig {
            spec: PerturbSpec::new(family, hi),
            magnitude_range: (lo, hi),
            budget: hi,
            coverage_target: 1.0,
            max_iterations: 50,
            inner_steps: 10,
            step_size: 0.01,
            batch_size: 500,
            seed,
            coverage: CoverageConfig::default(),
            record_timings: false,
        }
    }

    /// Pins every input to one magnitude.
    pub fn for_spec(spec: PerturbSpec, seed: u64) -> Self {
        FuzzConfig {
            spec,
            magnitude_range: (spec.magnitude, spec.magnitude),
            budget: spec.magnitude,
            ..FuzzConfig::for_family(spec.family, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (lo, hi) = self.magnitude_range;
        let (alo, ahi) = self.spec.family.allowed_range();
        for m in [lo, hi] {
            if !(m >= alo && m <= ahi) {
                return Err(Error::MagnitudeOutOfRange {
                    family: self.spec.family.name().into(),
                    magnitude: m,
                    lo: alo,
                    hi: ahi,
                });
            }
        }
        if lo > hi {
            return Err(Error::InvalidArgument(format!("empty magnitude range [{lo}, {hi}]")));
        }
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "budget must be >= 0, got {}",
                self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.coverage_target) {
            return Err(Error::InvalidArgument(format!(
                "coverage target must be in [0, 1], got {}",
                self.coverage_target
            )));
        }
        if self.max_iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations and batch_size must be > 0".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        self.coverage.validate()
    }
}

fn check_neurons<T: Scalar>(model: &Model<T>, neurons: &[usize]) -> Result<()> {
    if neurons.is_empty() {
        return Err(Error::InvalidArgument("objective needs at least one neuron".into()));
    }
    if let Some(&bad) = neurons.iter().find(|&&i| i >= model.num_neurons()) {
        return Err(Error::InvalidArgument(format!("neuron {bad} is out of range")));
    }
    Ok(())
}

/// Sum of |N_i(candidate) - N_i(clean)| over `neurons`.
pub fn objective<T: Scalar>(
    model: &Model<T>,
    clean: &Tensor<T>,
    candidate: &Tensor<T>,
    neurons: &[usize],
) -> Result<f64> {
    check_neurons(model, neurons)?;
    let c = model.forward(clean)?;
    let t = model.forward(candidate)?;
    Ok(neurons
        .iter()
        .map(|&i| (t.values[i] - c.values[i]).abs().as_f64())
        .sum())
}

/// Objective value and its gradient with respect to the candidate, given
/// the clean trace.
pub fn objective_gradient<T: Scalar>(
    model: &Model<T>,
    clean_trace: &ActivationTrace<T>,
    candidate: &Tensor<T>,
    neurons: &[usize],
) -> Result<(f64, Tensor<T>)> {
    check_neurons(model, neurons)?;
    let (v, g) = model.input_gradient(candidate, |t| {
        let mut grad = vec![T::zero(); t.values.len()];
        let mut value = T::zero();
        for &i in neurons {
            let d = t.values[i] - clean_trace.values[i];
            value += d.abs();
            grad[i] += d.sign0();
        }
        (value, grad)
    })?;
    Ok((v.as_f64(), g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentParams {
    pub steps: usize,
    pub step_size: f64,
    pub budget: f64,
}

/// Gradient ascent on the objective, projected onto the budget ball around
/// `clean` and onto [0, 1]. Returns the best iterate seen and its value.
/// A zero gradient is replaced by a random sign direction from `rng`.
pub fn maximize<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    clean: &Tensor<T>,
    seed_candidate: &Tensor<T>,
    neurons: &[usize],
    params: &AscentParams,
    rng: &mut R,
) -> Result<(Tensor<T>, f64)> {
    if seed_candidate.shape() != clean.shape() {
        return Err(Error::ShapeMismatch {
            expected: clean.shape().to_vec(),
            actual: seed_candidate.shape().to_vec(),
        });
    }
    let clean_trace = &model.forward(clean)?;
    let radius = T::of(params.budget);
    let step = T::of(params.step_size);
    let mut x = seed_candidate.clone();
    project(x.data_mut(), clean.data(), radius);
    let (mut val, mut grad) = objective_gradient(model, clean_trace, &x, neurons)?;
    let mut best = (x.clone(), val);
    for _ in 0..params.steps {
        if grad.data().iter().all(|g| g.is_zero()) {
            for v in x.data_mut() {
                let s = if rng.random::<bool>() { step } else { -step };
                *v += s;
            }
        } else {
            for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
                *v += step * g;
            }
        }
        project(x.data_mut(), clean.data(), radius);
        (val, grad) = objective_gradient(model, clean_trace, &x, neurons)?;
        if val > best.1 {
            best = (x.clone(), val);
        }
    }
    Ok(best)
}

struct Slot<T> {
    data_index: usize,
    spec: PerturbSpec,
    candidate: Tensor<T>,
}

/// Magnitude drawn for input `input_id` at iteration 0.
pub fn initial_magnitude(cfg: &FuzzConfig, input_id: usize) -> f64 {
    let (lo, hi) = cfg.magnitude_range;
    if lo == hi {
        return lo;
    }
    let u: f64 = rng::stream(cfg.seed, &[TAG_MAGNITUDE, input_id as u64]).random();
    lo + (hi - lo) * u
}

/// Runs a full campaign. `on_iteration` sees the partial result after every
/// iteration (used for checkpointing).
pub fn run_campaign<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    cfg: &FuzzConfig,
    mut on_iteration: impl FnMut(&CampaignResult<T>) -> Result<()>,
) -> Result<CampaignResult<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the model outputs {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let started = Instant::now();
    let mut timings = PhaseTimings::default();
    let n = data.len();
    let traces: Vec<ActivationTrace<T>> = data
        .inputs
        .par_iter()
        .map(|x| model.forward(x))
        .collect::<Result<_>>()?;

    let t0 = Instant::now();
    let mut slots: Vec<Slot<T>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|j| {
            let di = j % n;
            let spec = cfg.spec.with_magnitude(initial_magnitude(cfg, j));
            let mut noise = rng::stream(cfg.seed, &[TAG_NOISE, j as u64]);
            let candidate = perturb(&spec, model, &data.inputs[di], data.labels[di], &mut noise)?;
            Ok(Slot {
                data_index: di,
                spec,
                candidate,
            })
        })
        .collect::<Result<_>>()?;
    timings.fuzzer_secs += t0.elapsed().as_secs_f64();

    let mut store = SensitivityStore::new(model.num_neurons());
    let mut faults = FaultLog::new();
    let mut result = CampaignResult {
        technique: Technique::Senscov,
        config: serde_json::to_value(cfg)?,
        model_hash: model_hash(model)?,
        iterations: Vec::new(),
        reports: Vec::new(),
        faults: Vec::new(),
        fault_inputs: Vec::new(),
        inputs_generated: 0,
        termination: Termination::BudgetExhausted,
        timings: None,
    };
    let mut frozen: Option<Vec<usize>> = None;
    let ascent = AscentParams {
        steps: cfg.inner_steps,
        step_size: cfg.step_size,
        budget: cfg.budget,
    };

    for it in 0..cfg.max_iterations {
        let t1 = Instant::now();
        let items: Vec<BatchItem<'_, T>> = slots
            .iter()
            .enumerate()
            .map(|(j, s)| BatchItem {
                input_id: j,
                label: data.labels[s.data_index],
                clean: &data.inputs[s.data_index],
                clean_trace: Some(&traces[s.data_index]),
                perturbed: &s.candidate,
                spec: s.spec,
            })
            .collect();
        let new_faults = process_batch(model, &items, it, &mut store, &mut faults)?;
        drop(items);
        result.inputs_generated += slots.len();
        timings.calculator_secs += t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        if cfg.coverage.freeze_selection && frozen.is_none() {
            frozen = Some(sample_neurons(&store.variances(), cfg.coverage.sample_size)?);
        }
        let report = coverage(&store, &cfg.coverage, cfg.seed, it, frozen.as_deref())?;
        timings.coverage_secs += t2.elapsed().as_secs_f64();

        result.iterations.push(IterationSummary {
            iteration: it,
            inputs: slots.len(),
            new_faults,
            total_faults: faults.len(),
            coverage: report.coverage,
        });
        let done = report.coverage >= cfg.coverage_target;
        let unconverged = report.unconverged();
        result.reports.push(report);
        result.faults = faults.records.clone();
        result.fault_inputs = faults.inputs.clone();
        if done {
            result.termination = Termination::CoverageReached;
            break;
        }
        if it + 1 == cfg.max_iterations {
            result.termination = Termination::BudgetExhausted;
            break;
        }
        on_iteration(&result)?;

        let t3 = Instant::now();
        let next: Vec<Tensor<T>> = slots
            .par_iter()
            .enumerate()
            .map(|(j, s)| {
                let mut r = rng::stream(cfg.seed, &[TAG_ASCENT, it as u64, j as u64]);
                let (x, _) = maximize(
                    model,
                    &data.inputs[s.data_index],
                    &s.candidate,
                    &unconverged,
                    &ascent,
                    &mut r,
                )?;
                Ok(x)
            })
            .collect::<Result<_>>()?;
        for (s, x) in slots.iter_mut().zip(next) {
            s.candidate = x;
        }
        timings.fuzzer_secs += t3.elapsed().as_secs_f64();
    }
    timings.total_secs = started.elapsed().as_secs_f64();
    if cfg.record_timings {
        result.timings = Some(timings);
    }
    Ok(result)
}
