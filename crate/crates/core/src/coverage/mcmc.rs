//! Adaptive random-walk Metropolis for a normal model of one neuron's
//! sensitivity samples.
//!
//! Parameters are `(mu, log sigma)` with priors `mu ~ Normal(0, prior_mu_sd^2)`
//! and `sigma ~ HalfNormal(prior_sigma_scale)`. The likelihood only needs the
//! sample count, mean and centered sum of squares.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    /// Kept draws per chain.
    pub draws: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub prior_mu_sd: f64,
    pub prior_sigma_scale: f64,
    /// Neurons with fewer samples are not fitted and count as unconverged.
    pub min_samples: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 2,
            draws: 1000,
            warmup: 500,
            target_accept: 0.3,
            prior_mu_sd: 10.0,
            prior_sigma_scale: 10.0,
            min_samples: 30,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws < 4 || self.warmup == 0 {
            return Err(Error::InvalidArgument(
                "mcmc needs chains >= 1, draws >= 4 and warmup >= 1".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument("target acceptance must be in (0, 1)".into()));
        }
        if !(self.prior_mu_sd > 0.0 && self.prior_sigma_scale > 0.0) {
            return Err(Error::InvalidArgument("prior scales must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warm-up draws, one vector per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChains {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub acceptance: Vec<f64>,
}

impl PosteriorChains {
    pub fn mu_draws(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu.iter().flatten().copied()
    }

    pub fn mu_mean(&self) -> f64 {
        let n = self.mu.iter().map(Vec::len).sum::<usize>() as f64;
        self.mu_draws().sum::<f64>() / n
    }

    pub fn mu_sd(&self) -> f64 {
        let n = self.mu.iter().map(Vec::len).sum::<usize>() as f64;
        let m = self.mu_mean();
        (self.mu_draws().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Summary {
    n: f64,
    mean: f64,
    ss: f64,
}

impl Summary {
    fn of<T: Scalar>(xs: &[T]) -> Self {
        let n = xs.len() as f64;
        let shift = xs[0].as_f64();
        let mean = shift + xs.iter().map(|v| v.as_f64() - shift).sum::<f64>() / n;
        let ss = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        Summary { n, mean, ss }
    }
}

struct Target {
    data: Summary,
    inv_mu_var: f64,
    inv_sigma_var: f64,
    log_sigma_floor: f64,
}

impl Target {
    fn log_density(&self, mu: f64, log_sigma: f64) -> f64 {
        if log_sigma < self.log_sigma_floor {
            return f64::NEG_INFINITY;
        }
        let s2 = (2.0 * log_sigma).exp();
        let d = mu - self.data.mean;
        let loglik = -self.data.n * log_sigma - (self.data.ss + self.data.n * d * d) / (2.0 * s2);
        let prior = -0.5 * mu * mu * self.inv_mu_var - 0.5 * s2 * self.inv_sigma_var;
        // + log_sigma: Jacobian of sigma = exp(log_sigma)
        loglik + prior + log_sigma
    }
}

/// Draws from the posterior of `(mu, sigma)` given `samples`.
///
/// Chain `c` uses the stream `(seed, c)`. Proposals are Gaussian on
/// `(mu, log sigma)`, scaled from the data, and a global scale factor is
/// adapted during warm-up toward `target_accept` (Robbins-Monro, frozen
/// afterwards).
pub fn fit_posterior<T: Scalar>(samples: &[T], cfg: &McmcConfig, seed: u64) -> Result<PosteriorChains> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior samples".into()));
    }
    let data = Summary::of(samples);
    let floor = 1e-10 * (1.0 + data.mean.abs());
    let sd = (data.ss / (data.n - 1.0)).sqrt().max(10.0 * floor);
    let target = Target {
        data,
        inv_mu_var: cfg.prior_mu_sd.powi(-2),
        inv_sigma_var: cfg.prior_sigma_scale.powi(-2),
        log_sigma_floor: floor.ln(),
    };
    let base = 2.38 / 2f64.sqrt();
    let scale_mu = base * sd / data.n.sqrt();
    let scale_ls = base / (2.0 * data.n).sqrt();

    let mut out = PosteriorChains {
        mu: Vec::with_capacity(cfg.chains),
        sigma: Vec::with_capacity(cfg.chains),
        acceptance: Vec::with_capacity(cfg.chains),
    };
    for chain in 0..cfg.chains {
        let mut r = rng::stream(seed, &[chain as u64]);
        let mut mu = data.mean + 2.0 * scale_mu * r.sample::<f64, _>(StandardNormal);
        let mut ls = sd.ln() + 2.0 * scale_ls * r.sample::<f64, _>(StandardNormal);
        ls = ls.max(target.log_sigma_floor);
        let mut lp = target.log_density(mu, ls);
        let mut log_factor = 0.0f64;
        let mut mus = Vec::with_capacity(cfg.draws);
        let mut sigmas = Vec::with_capacity(cfg.draws);
        let mut accepted = 0usize;
        for step in 0..cfg.warmup + cfg.draws {
            let f = log_factor.exp();
            let prop_mu = mu + f * scale_mu * r.sample::<f64, _>(StandardNormal);
            let prop_ls = ls + f * scale_ls * r.sample::<f64, _>(StandardNormal);
            let prop_lp = target.log_density(prop_mu, prop_ls);
            let log_u: f64 = r.random::<f64>().ln();
            let accept = prop_lp.is_finite() && log_u < prop_lp - lp;
            if accept {
                mu = prop_mu;
                ls = prop_ls;
                lp = prop_lp;
            }
            if step < cfg.warmup {
                let gain = 1.0 / ((step + 1) as f64).powf(0.6);
                log_factor += gain * (f64::from(u8::from(accept)) - cfg.target_accept);
            } else {
                accepted += usize::from(accept);
                mus.push(mu);
                sigmas.push(ls.exp());
            }
        }
        out.mu.push(mus);
        out.sigma.push(sigmas);
        out.acceptance.push(accepted as f64 / cfg.draws as f64);
    }
    Ok(out)
}
