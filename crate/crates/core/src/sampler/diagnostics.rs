//! Convergence diagnostics: split potential scale reduction and
//! autocorrelation-based effective sample size.

use crate::error::{Error, Result};
use crate::sampler::PosteriorSample;

/// ESS is capped at this multiple of the total draw count; antithetic
/// chains can legitimately exceed the draw count, but not without bound.
pub const MAX_ESS_INFLATION: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct ParamDiagnostics {
    pub name: String,
    pub psrf: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
}

impl DiagnosticsReport {
    pub fn get(&self, name: &str) -> Option<&ParamDiagnostics> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn max_psrf(&self) -> f64 {
        self.params.iter().map(|p| p.psrf).fold(1.0, f64::max)
    }
}

/// Split-PSRF and ESS for every stored parameter. Needs at least two
/// chains for the PSRF to be defined.
pub fn diagnostics(sample: &PosteriorSample) -> Result<DiagnosticsReport> {
    if sample.n_chains < 2 {
        return Err(Error::InsufficientChains(sample.n_chains));
    }
    let mut params = Vec::with_capacity(sample.param_names.len());
    for (idx, name) in sample.param_names.iter().enumerate() {
        let chains = sample.chain_series(idx);
        params.push(ParamDiagnostics {
            name: name.clone(),
            psrf: split_psrf(&chains),
            ess: effective_sample_size(&chains),
        });
    }
    Ok(DiagnosticsReport { params })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Split potential scale reduction factor: each chain is halved and the
/// usual between/within variance ratio is computed over the halves.
/// Degenerate (zero-variance) chains report 1 when they agree and infinity
/// when they do not; the estimate is clamped to be >= 1.
pub fn split_psrf(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    let min_len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = min_len / 2;
    if half < 1 {
        return 1.0;
    }
    for c in chains {
        halves.push(&c[..half]);
        // When the length is odd the middle draw is dropped.
        halves.push(&c[c.len() - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves.iter().map(|h| sample_var(h)).collect();
    let w = mean(&vars);
    let var_of_means = sample_var(&means);
    if w == 0.0 {
        return if var_of_means == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + var_of_means;
    (var_plus / w).sqrt().max(1.0)
}

/// Effective sample size from combined-chain autocorrelations with Geyer's
/// initial monotone positive sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let total = (m * n) as f64;
    if n < 4 {
        return total.max(1.0);
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_var(&c[..n])).collect();
    let w = mean(&vars);
    let between = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = w * (n as f64 - 1.0) / n as f64 + between;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return total;
    }
    // Mean autocovariance at lag t across chains (biased, / n).
    let acov = |t: usize| -> f64 {
        let mut s = 0.0;
        for (c, chain) in chains.iter().enumerate() {
            let mu = means[c];
            let mut cc = 0.0;
            for i in 0..(n - t) {
                cc += (chain[i] - mu) * (chain[i + t] - mu);
            }
            s += cc / n as f64;
        }
        s / m as f64
    };
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    // Geyer pairs G_k = rho(2k) + rho(2k+1), truncated at the first
    // non-positive pair and forced monotone non-increasing.
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0usize;
    while 2 * k + 1 < n {
        let g = if k == 0 {
            1.0 + rho(1)
        } else {
            rho(2 * k) + rho(2 * k + 1)
        };
        if g <= 0.0 {
            break;
        }
        let g = g.min(prev);
        sum_pairs += g;
        prev = g;
        k += 1;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / MAX_ESS_INFLATION);
    (total / tau).min(total * MAX_ESS_INFLATION).max(1e-6)
}
