//! Sensitivity convergence coverage: variance-stratified neuron sampling,
//! per-neuron posterior fits and the MCSE convergence test.

mod mcmc;
mod mcse;
mod sampler;

pub use mcmc::{fit_posterior, McmcConfig, PosteriorChains};
pub use mcse::{batch_means, mcse, mcse_pooled};
pub use sampler::sample_neurons;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::sensitivity::{sample_variance, SensitivityStore};

pub const DEFAULT_SAMPLE_SIZE: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Sampler size `k`.
    pub sample_size: usize,
    /// Convergence threshold `t` on MCSE.
    pub threshold: f64,
    pub mcmc: McmcConfig,
    /// Reuse the first iteration's neuron selection instead of re-sampling.
    #[serde(default)]
    pub freeze_selection: bool,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            sample_size: DEFAULT_SAMPLE_SIZE,
            threshold: DEFAULT_THRESHOLD,
            mcmc: McmcConfig::default(),
            freeze_selection: false,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::InvalidArgument("sample size k must be at least 1".into()));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be >= 0, got {}",
                self.threshold
            )));
        }
        self.mcmc.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub neuron_id: usize,
    pub sample_count: usize,
    pub variance: f64,
    /// Absent when the neuron had too few samples to be fitted.
    pub posterior_mean_mu: Option<f64>,
    pub posterior_sd_mu: Option<f64>,
    pub mcse: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub iteration: usize,
    pub threshold: f64,
    pub sampled_neuron_ids: Vec<usize>,
    pub stats: Vec<NeuronStats>,
    pub coverage: f64,
}

impl CoverageReport {
    /// Builds a report; coverage is `#converged / #sampled`.
    pub fn from_stats(iteration: usize, threshold: f64, stats: Vec<NeuronStats>) -> Self {
        let converged = stats.iter().filter(|s| s.converged).count();
        let coverage = if stats.is_empty() {
            0.0
        } else {
            converged as f64 / stats.len() as f64
        };
        CoverageReport {
            iteration,
            threshold,
            sampled_neuron_ids: stats.iter().map(|s| s.neuron_id).collect(),
            stats,
            coverage,
        }
    }

    pub fn converged_count(&self) -> usize {
        self.stats.iter().filter(|s| s.converged).count()
    }

    pub fn unconverged(&self) -> Vec<usize> {
        self.stats
            .iter()
            .filter(|s| !s.converged)
            .map(|s| s.neuron_id)
            .collect()
    }

    pub const CSV_HEADER: &'static str = "neuron_id,samples,variance,mcse,converged";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.stats {
            let mcse = s.mcse.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.neuron_id, s.sample_count, s.variance, mcse, s.converged
            ));
        }
        out
    }
}

/// Seed of the MCMC stream for one neuron in one iteration.
pub fn neuron_seed(seed: u64, iteration: usize, neuron: usize) -> u64 {
    rng::derive(seed, &[rng::TAG_MCMC, iteration as u64, neuron as u64])
}

/// Fits one neuron and applies the `mcse <= threshold` test.
pub fn neuron_stats<T: Scalar>(
    neuron_id: usize,
    samples: &[T],
    cfg: &CoverageConfig,
    seed: u64,
    iteration: usize,
) -> Result<NeuronStats> {
    let variance = sample_variance(samples);
    if samples.len() < cfg.mcmc.min_samples.max(2) {
        return Ok(NeuronStats {
            neuron_id,
            sample_count: samples.len(),
            variance,
            posterior_mean_mu: None,
            posterior_sd_mu: None,
            mcse: None,
            converged: false,
        });
    }
    let post = fit_posterior(samples, &cfg.mcmc, neuron_seed(seed, iteration, neuron_id))?;
    let mcse = mcse_pooled(&post.mu)?;
    Ok(NeuronStats {
        neuron_id,
        sample_count: samples.len(),
        variance,
        posterior_mean_mu: Some(post.mu_mean()),
        posterior_sd_mu: Some(post.mu_sd()),
        mcse: Some(mcse),
        converged: mcse <= cfg.threshold,
    })
}

/// Phase 2 over the whole store. `selection` overrides the sampler (used to
/// freeze the neuron set across iterations).
pub fn coverage<T: Scalar>(
    store: &SensitivityStore<T>,
    cfg: &CoverageConfig,
    seed: u64,
    iteration: usize,
    selection: Option<&[usize]>,
) -> Result<CoverageReport> {
    cfg.validate()?;
    if store.is_empty() || store.num_neurons() == 0 {
        return Err(Error::InvalidArgument(
            "coverage needs a non-empty sensitivity store".into(),
        ));
    }
    let ids = match selection {
        Some(ids) => {
            if let Some(&bad) = ids.iter().find(|&&i| i >= store.num_neurons()) {
                return Err(Error::InvalidArgument(format!("neuron {bad} is out of range")));
            }
            ids.to_vec()
        }
        None => sample_neurons(&store.variances(), cfg.sample_size)?,
    };
    let stats = ids
        .par_iter()
        .map(|&id| neuron_stats(id, store.samples(id), cfg, seed, iteration))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport::from_stats(iteration, cfg.threshold, stats))
}
