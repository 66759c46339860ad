use crate::error::{Error, Result};

/// Mean computed relative to the first element, so constant input returns
/// that constant exactly.
fn shifted_mean(xs: &[f64]) -> f64 {
    let c = xs[0];
    c + xs.iter().map(|&x| x - c).sum::<f64>() / xs.len() as f64
}

/// `floor(sqrt(L))` batch means of `floor(L / b)` draws each; the tail is dropped.
pub fn batch_means(chain: &[f64]) -> Result<Vec<f64>> {
    if chain.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: chain.len(),
        });
    }
    let batches = (chain.len() as f64).sqrt().floor() as usize;
    let size = chain.len() / batches;
    Ok(chain.chunks_exact(size).take(batches).map(shifted_mean).collect())
}

fn sd_over_root_n(means: &[f64]) -> f64 {
    let n = means.len() as f64;
    let mean = shifted_mean(means);
    let var = means.iter().map(|&m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / n.sqrt()
}

/// Batch-means Monte Carlo standard error of the chain's mean.
pub fn mcse(chain: &[f64]) -> Result<f64> {
    Ok(sd_over_root_n(&batch_means(chain)?))
}

/// Multi-chain MCSE: batch means are formed per chain and pooled.
pub fn mcse_pooled<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    let mut pooled = Vec::new();
    for c in chains {
        pooled.extend(batch_means(c.as_ref())?);
    }
    if pooled.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: pooled.len(),
        });
    }
    Ok(sd_over_root_n(&pooled))
}
