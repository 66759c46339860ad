//! The correlation, retraining and parameter-sensitivity experiments.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::CampaignResult;
use crate::coverage::{coverage, CoverageConfig};
use crate::data::Dataset;
use crate::engine::{accuracy, model_hash, sgd_train, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::fuzzer::{run_campaign, FuzzConfig};
use crate::perturb::{perturb, Family, PerturbSpec};
use crate::rng::{self, TAG_NOISE, TAG_REPLICATE};
use crate::scalar::Scalar;
use crate::sensitivity::SensitivityStore;
use crate::stats::pearson;
use crate::tensor::Tensor;

/// Perturbs every input independently; input `i` uses its own stream.
pub fn perturb_dataset<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<Dataset<T>> {
    perturb_replicate(model, data, spec, seed, 0)
}

fn perturb_replicate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    spec: &PerturbSpec,
    seed: u64,
    replicate: usize,
) -> Result<Dataset<T>> {
    let inputs = data
        .inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut r = rng::stream(seed, &[TAG_REPLICATE, replicate as u64, i as u64]);
            perturb(spec, model, x, y, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        inputs,
        labels: data.labels.clone(),
        num_classes: data.num_classes,
        split: data.split,
    })
}

/// Fraction of perturbed inputs whose prediction differs from the label.
pub fn error_rate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, spec: &PerturbSpec, seed: u64) -> Result<f64> {
    let perturbed = perturb_dataset(model, data, spec, seed)?;
    Ok(1.0 - accuracy(model, &perturbed)?)
}

/// Mean error rate over `replicates` independent perturbations of `data`.
pub fn error_rate_replicated<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    spec: &PerturbSpec,
    seed: u64,
    replicates: usize,
) -> Result<f64> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let mut total = 0.0;
    for r in 0..replicates {
        total += 1.0 - accuracy(model, &perturb_replicate(model, data, spec, seed, r)?)?;
    }
    Ok(total / replicates as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub magnitude: f64,
    pub error_rate: f64,
    pub faults_detected: usize,
    pub inputs_generated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub family: Family,
    pub seed: u64,
    pub model_hash: String,
    pub config: CorrelateConfig,
    /// Sorted by magnitude.
    pub rows: Vec<ExperimentRow>,
    pub pearson: f64,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str = "magnitude,error_rate,faults_detected,inputs_generated";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.magnitude, r.error_rate, r.faults_detected, r.inputs_generated
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelateConfig {
    /// Campaign settings; family and seed come from here, magnitudes from the sweep.
    pub campaign: FuzzConfig,
    /// Perturbed copies of the dataset averaged into each error rate.
    pub error_replicates: usize,
}

impl CorrelateConfig {
    pub fn new(family: Family, seed: u64) -> Self {
        CorrelateConfig {
            campaign: FuzzConfig::for_family(family, seed),
            error_replicates: 10,
        }
    }
}

/// One full campaign per sweep magnitude (run in parallel, all with the
/// same seed), paired with the error rate at that magnitude.
pub fn correlate_experiment<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    config: &CorrelateConfig,
) -> Result<ExperimentReport> {
    let template = &config.campaign;
    let family = template.spec.family;
    let rows = family
        .sweep()
        .par_iter()
        .map(|&m| {
            let started = Instant::now();
            let mut cfg = FuzzConfig::for_spec(template.spec.with_magnitude(m), template.seed);
            cfg.coverage_target = template.coverage_target;
            cfg.max_iterations = template.max_iterations;
            cfg.inner_steps = template.inner_steps;
            cfg.step_size = template.step_size;
            cfg.batch_size = template.batch_size;
            cfg.coverage = template.coverage;
            let campaign = run_campaign(model, data, &cfg, |_| Ok(()))?;
            let er = error_rate_replicated(model, data, &cfg.spec, template.seed, config.error_replicates)?;
            Ok(ExperimentRow {
                magnitude: m,
                error_rate: er,
                faults_detected: campaign.fault_count(),
                inputs_generated: campaign.inputs_generated,
                wall_clock_secs: template.record_timings.then(|| started.elapsed().as_secs_f64()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.error_rate).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.faults_detected as f64).collect();
    Ok(ExperimentReport {
        family,
        seed: template.seed,
        model_hash: model_hash(model)?,
        config: *config,
        pearson: pearson(&xs, &ys)?,
        rows,
    })
}

/// Fault inputs paired with the ground-truth labels of their clean inputs.
pub fn fault_corpus<T: Scalar>(campaign: &CampaignResult<T>) -> (Vec<Tensor<T>>, Vec<usize>) {
    let inputs = campaign
        .faults
        .iter()
        .map(|f| campaign.fault_inputs[f.blob_index].clone())
        .collect();
    let labels = campaign.faults.iter().map(|f| f.label).collect();
    (inputs, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    /// Perturbation applied to the held-out set for evaluation.
    pub eval_spec: PerturbSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub fault_count: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub clean_accuracy_before: f64,
    pub clean_accuracy_after: f64,
}

impl RetrainReport {
    pub fn gain(&self) -> f64 {
        self.accuracy_after - self.accuracy_before
    }
}

/// Fine-tunes on `train` plus the fault corpus and measures accuracy on a
/// perturbed copy of `heldout` before and after.
pub fn retrain_experiment<T: Scalar>(
    model: &Model<T>,
    train: &Dataset<T>,
    heldout: &Dataset<T>,
    fault_inputs: &[Tensor<T>],
    fault_labels: &[usize],
    cfg: &RetrainConfig,
) -> Result<(Model<T>, RetrainReport)> {
    if fault_inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "retraining needs at least one fault input".into(),
        ));
    }
    let faults = Dataset::new(fault_inputs.to_vec(), fault_labels.to_vec(), train.num_classes)?;
    let mut augmented = train.clone();
    augmented.extend(&faults)?;
    let eval = perturb_dataset(
        model,
        heldout,
        &cfg.eval_spec,
        rng::derive(cfg.train.seed, &[TAG_NOISE]),
    )?;
    let tuned = sgd_train(model, &augmented, &cfg.train)?;
    let report = RetrainReport {
        fault_count: fault_inputs.len(),
        accuracy_before: accuracy(model, &eval)?,
        accuracy_after: accuracy(&tuned, &eval)?,
        clean_accuracy_before: accuracy(model, heldout)?,
        clean_accuracy_after: accuracy(&tuned, heldout)?,
    };
    Ok((tuned, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub value: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeStudy {
    /// Coverage over every neuron.
    pub ground_truth: f64,
    pub rows: Vec<StudyRow>,
}

/// Coverage at each sampler size `k`, against the all-neuron coverage.
pub fn sample_size_study<T: Scalar>(
    store: &SensitivityStore<T>,
    sizes: &[usize],
    cfg: &CoverageConfig,
    seed: u64,
) -> Result<SampleSizeStudy> {
    let all: Vec<usize> = (0..store.num_neurons()).collect();
    let ground_truth = coverage(store, cfg, seed, 0, Some(&all))?.coverage;
    let rows = sizes
        .iter()
        .map(|&k| {
            let c = CoverageConfig { sample_size: k, ..*cfg };
            Ok(StudyRow {
                value: k as f64,
                coverage: coverage(store, &c, seed, 0, None)?.coverage,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampleSizeStudy { ground_truth, rows })
}

/// Coverage at each convergence threshold `t`.
pub fn threshold_study<T: Scalar>(
    store: &SensitivityStore<T>,
    thresholds: &[f64],
    cfg: &CoverageConfig,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let c = CoverageConfig { threshold: t, ..*cfg };
            Ok(StudyRow {
                value: t,
                coverage: coverage(store, &c, seed, 0, None)?.coverage,
            })
        })
        .collect()
}
