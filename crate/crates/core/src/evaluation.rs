//! Model comparison: DIC and the proper scoring rules RPS, LogS and DSS
//! computed in-sample from the posterior predictive mixture, plus a binned
//! angle-correlation summary for reading anisotropy off a fitted model.

use nalgebra::DVector;
use statrs::function::gamma::ln_gamma;

use crate::config::{ModelConfig, SpatialLayout};
use crate::covariance::{correlate, SpatialPoint};
use crate::error::{Error, Result};
use crate::geometry::{equator_angle, euclidean_distance, Location, Shore};
use crate::model::Dataset;
use crate::sampler::PosteriorSample;

/// Tail mass below which the predictive pmf is truncated.
pub const PMF_TAIL_TOL: f64 = 1e-10;
/// Floor applied to predictive probabilities inside the log score.
pub const LOG_SCORE_FLOOR: f64 = 1e-300;

/// Per-site posterior predictive: an equally weighted mixture of Poisson
/// pmfs over the stored draws, truncated once the tail mass drops below
/// `PMF_TAIL_TOL`, with the exact mixture mean and standard deviation.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pmf: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl PredictiveDistribution {
    /// Mixture of Poisson rates, one per posterior draw.
    pub fn from_rates(rates: &[f64]) -> Self {
        assert!(!rates.is_empty(), "predictive needs at least one draw");
        let m = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / m;
        // Law of total variance: E[lambda] + Var[lambda], exact.
        let var_rates = rates.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / m;
        let var = mean + var_rates;
        // Per-draw log pmf recursion: lp(k+1) = lp(k) + ln lambda - ln(k+1).
        let mut lp: Vec<f64> = rates
            .iter()
            .map(|&l| if l > 0.0 { -l } else { 0.0 })
            .collect();
        let ln_rates: Vec<f64> = rates
            .iter()
            .map(|&l| if l > 0.0 { l.ln() } else { f64::NEG_INFINITY })
            .collect();
        let mut pmf = Vec::new();
        let mut cdf = 0.0;
        let cap = 2_000_000usize;
        for k in 0..cap {
            let pk = lp.iter().map(|&v| v.exp()).sum::<f64>() / m;
            pmf.push(pk);
            cdf += pk;
            if 1.0 - cdf < PMF_TAIL_TOL && k as f64 > mean {
                break;
            }
            let lnk = ((k + 1) as f64).ln();
            for (v, &lr) in lp.iter_mut().zip(ln_rates.iter()) {
                *v += lr - lnk;
            }
        }
        PredictiveDistribution {
            pmf,
            mean,
            sd: var.sqrt(),
        }
    }

    /// Explicit pmf over 0..len-1; callers are responsible for it summing
    /// to one up to truncation. Mean and sd are computed from the entries.
    pub fn from_pmf(pmf: Vec<f64>) -> Self {
        let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let second: f64 = pmf
            .iter()
            .enumerate()
            .map(|(k, p)| (k as f64).powi(2) * p)
            .sum();
        PredictiveDistribution {
            mean,
            sd: (second - mean * mean).max(0.0).sqrt(),
            pmf,
        }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        self.pmf.get(k as usize).copied().unwrap_or(0.0)
    }

    pub fn support_max(&self) -> u64 {
        self.pmf.len().saturating_sub(1) as u64
    }

    pub fn total_mass(&self) -> f64 {
        self.pmf.iter().sum()
    }
}

/// Deviance summaries and mean scores for one fitted model, laid out in the
/// comparison-table column order.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub dbar: f64,
    pub p_d: f64,
    pub dic: f64,
    pub rps: f64,
    pub log_s: f64,
    pub dss: f64,
    /// Sites where the predictive probability of the observation hit the
    /// log-score floor.
    pub capped_sites: usize,
}

impl ScoreReport {
    pub const CSV_HEADER: &'static str = "model,Dbar,pD,DIC,RPS,LogS,DSS";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6}",
            self.model, self.dbar, self.p_d, self.dic, self.rps, self.log_s, self.dss
        )
    }
}

/// DIC decomposition: Dbar = mean deviance, pD = Dbar - deviance at the
/// plug-in, DIC = Dbar + pD.
pub fn dic(deviance_draws: &[f64], deviance_at_mean: f64) -> (f64, f64, f64) {
    assert!(!deviance_draws.is_empty(), "need at least one deviance draw");
    let dbar = deviance_draws.iter().sum::<f64>() / deviance_draws.len() as f64;
    let p_d = dbar - deviance_at_mean;
    (dbar, p_d, dbar + p_d)
}

/// Ranked probability score sum_k (F(k) - 1{y <= k})^2.
pub fn rps(pd: &PredictiveDistribution, y: u64) -> f64 {
    let kmax = pd.support_max().max(y);
    let mut cdf = 0.0;
    let mut total = 0.0;
    for k in 0..=kmax {
        cdf += pd.pmf(k);
        let indicator = if y <= k { 1.0 } else { 0.0 };
        total += (cdf.min(1.0) - indicator).powi(2);
    }
    total
}

/// Logarithmic score -log p(y), with the probability floored at
/// `LOG_SCORE_FLOOR` so one impossible observation cannot produce an
/// infinite total.
pub fn log_score(pd: &PredictiveDistribution, y: u64) -> f64 {
    -pd.pmf(y).max(LOG_SCORE_FLOOR).ln()
}

/// Dawid-Sebastiani score ((y - mu)/sigma)^2 + 2 log sigma.
pub fn dss(mu: f64, sigma: f64, y: u64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let z = (y as f64 - mu) / sigma;
    Ok(z * z + 2.0 * sigma.ln())
}

/// Score a fitted model in-sample: deviance draws from the stored states,
/// the plug-in deviance at the posterior mean linear predictor, and mean
/// RPS/LogS/DSS over sites from the per-site predictive mixtures.
pub fn score_model(sample: &PosteriorSample, data: &Dataset) -> Result<ScoreReport> {
    if sample.draws.is_empty() {
        return Err(Error::Config("empty posterior sample".into()));
    }
    let n = data.n();
    let m = sample.draws.len();
    let mut eta_mean = DVector::zeros(n);
    let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(m); n];
    let mut deviance_draws = Vec::with_capacity(m);
    for state in &sample.draws {
        let eta = state.log_lambda(data);
        let ll = crate::model::poisson_log_likelihood(eta.as_slice(), &data.counts)?;
        deviance_draws.push(-2.0 * ll);
        for i in 0..n {
            eta_mean[i] += eta[i] / m as f64;
            rates[i].push(eta[i].exp());
        }
    }
    // Plug-in deviance at the posterior mean of the linear predictor.
    let ll_at_mean =
        crate::model::poisson_log_likelihood(eta_mean.as_slice(), &data.counts)?;
    let (dbar, p_d, dic_val) = dic(&deviance_draws, -2.0 * ll_at_mean);

    let mut rps_sum = 0.0;
    let mut logs_sum = 0.0;
    let mut dss_sum = 0.0;
    let mut capped = 0usize;
    for i in 0..n {
        let pd = PredictiveDistribution::from_rates(&rates[i]);
        let y = data.counts[i];
        rps_sum += rps(&pd, y);
        if pd.pmf(y) <= LOG_SCORE_FLOOR {
            capped += 1;
        }
        logs_sum += log_score(&pd, y);
        dss_sum += dss(pd.mean, pd.sd, y)?;
    }
    Ok(ScoreReport {
        model: sample.model.clone(),
        dbar,
        p_d,
        dic: dic_val,
        rps: rps_sum / n as f64,
        log_s: logs_sum / n as f64,
        dss: dss_sum / n as f64,
        capped_sites: capped,
    })
}

/// One angle bin of the anisotropy summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AnisotropyBin {
    pub bin: usize,
    pub theta_lo: f64,
    pub theta_hi: f64,
    /// Mean posterior pair correlation, balanced across distance strata.
    pub mean_corr: f64,
    pub n_pairs: usize,
    /// Set when some distance stratum had no pairs in this bin.
    pub sparse: bool,
}

#[derive(Debug, Clone)]
pub struct AnisotropyTable {
    pub shore: Option<Shore>,
    pub n_strata: usize,
    pub bins: Vec<AnisotropyBin>,
}

impl AnisotropyTable {
    pub const CSV_HEADER: &'static str = "bin,theta_lo,theta_hi,mean_corr,n_pairs,sparse";

    pub fn csv_rows(&self) -> Vec<String> {
        self.bins
            .iter()
            .map(|b| {
                format!(
                    "{},{:.6},{:.6},{:.6},{},{}",
                    b.bin, b.theta_lo, b.theta_hi, b.mean_corr, b.n_pairs, b.sparse
                )
            })
            .collect()
    }

    /// Index of the bin with the highest mean correlation.
    pub fn peak_bin(&self) -> Option<&AnisotropyBin> {
        self.bins
            .iter()
            .filter(|b| b.n_pairs > 0)
            .max_by(|a, b| a.mean_corr.partial_cmp(&b.mean_corr).unwrap())
    }
}

/// Binned angle-correlation summary: location pairs are bucketed by the
/// acute angle their segment makes with the horizontal, stratified by
/// distance, and the posterior mean correlation is averaged per bin with
/// the distance strata weighted equally.
///
/// Restricting to one shore keeps the pairs inside a single Gaussian
/// process block; with no restriction, cross-shore pairs of by-shore
/// models are excluded (their correlation is structurally zero).
pub fn anisotropy_summary(
    sample: &PosteriorSample,
    locs: &[Location],
    n_bins: usize,
    shore: Option<Shore>,
) -> Result<AnisotropyTable> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one angle bin".into()));
    }
    let model_token = sample
        .model
        .split('-')
        .next()
        .unwrap_or(&sample.model)
        .to_string();
    let model: crate::config::ModelId = model_token.parse()?;
    let model = ModelConfig::new(model);
    let layout = SpatialLayout::new(&model, locs)?;
    if layout.blocks.is_empty() {
        return Err(Error::Config(
            "the no-spatial baseline has no correlation structure to summarize".into(),
        ));
    }

    // Pairs within blocks (optionally restricted to one shore), with their
    // geographic angle and distance plus the points the kernel consumes.
    struct Pair {
        block: usize,
        a: SpatialPoint,
        b: SpatialPoint,
        theta: f64,
        dist: f64,
    }
    let mut pairs = Vec::new();
    for (bidx, block) in layout.blocks.iter().enumerate() {
        if let (Some(want), Some(have)) = (shore, block.shore) {
            if want != have {
                continue;
            }
        }
        let pts: Vec<SpatialPoint> = match model.id.domain_kind() {
            crate::config::DomainKind::Circle(projection) => {
                let circle = crate::covariance::project_locations(projection, locs)?;
                block
                    .indices
                    .iter()
                    .map(|&i| SpatialPoint::new(circle[i].0, circle[i].1))
                    .collect()
            }
            _ => block
                .indices
                .iter()
                .map(|&i| SpatialPoint::from(&locs[i]))
                .collect(),
        };
        for a in 0..block.indices.len() {
            for b in (a + 1)..block.indices.len() {
                let la = &locs[block.indices[a]];
                let lb = &locs[block.indices[b]];
                let theta = match equator_angle(la.coords(), lb.coords()) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                pairs.push(Pair {
                    block: bidx,
                    a: pts[a],
                    b: pts[b],
                    theta,
                    dist: euclidean_distance(la.coords(), lb.coords()),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("no location pairs to summarize".into()));
    }

    // Posterior mean correlation per pair.
    let m = sample.draws.len().max(1);
    let mut mean_corr = vec![0.0f64; pairs.len()];
    for state in &sample.draws {
        for (k, pair) in pairs.iter().enumerate() {
            let spec = state.corr.get(pair.block).ok_or_else(|| {
                Error::Config("draw is missing a correlation block".into())
            })?;
            mean_corr[k] += correlate(spec, &pair.a, &pair.b)? / m as f64;
        }
    }

    // Distance strata by quantile, then balanced bin means.
    let n_strata = 3usize.min(pairs.len());
    let mut by_dist: Vec<usize> = (0..pairs.len()).collect();
    by_dist.sort_by(|&i, &j| pairs[i].dist.partial_cmp(&pairs[j].dist).unwrap());
    let mut stratum = vec![0usize; pairs.len()];
    for (rank, &idx) in by_dist.iter().enumerate() {
        stratum[idx] = (rank * n_strata) / pairs.len();
    }
    let width = std::f64::consts::FRAC_PI_2 / n_bins as f64;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b as f64 * width;
        let hi = lo + width;
        let mut cell_sum = vec![0.0f64; n_strata];
        let mut cell_n = vec![0usize; n_strata];
        let mut n_pairs = 0usize;
        for (k, pair) in pairs.iter().enumerate() {
            let slot = ((pair.theta / width) as usize).min(n_bins - 1);
            if slot == b {
                cell_sum[stratum[k]] += mean_corr[k];
                cell_n[stratum[k]] += 1;
                n_pairs += 1;
            }
        }
        let filled: Vec<f64> = cell_sum
            .iter()
            .zip(&cell_n)
            .filter(|(_, &n)| n > 0)
            .map(|(s, &n)| s / n as f64)
            .collect();
        let sparse = filled.len() < n_strata;
        let mean = if filled.is_empty() {
            f64::NAN
        } else {
            filled.iter().sum::<f64>() / filled.len() as f64
        };
        bins.push(AnisotropyBin {
            bin: b,
            theta_lo: lo,
            theta_hi: hi,
            mean_corr: mean,
            n_pairs,
            sparse,
        });
    }
    Ok(AnisotropyTable {
        shore,
        n_strata,
        bins,
    })
}

/// Log pmf of a Poisson(lambda) at y, used by the propriety checks.
pub fn poisson_pmf(y: u64, lambda: f64) -> f64 {
    (-lambda + y as f64 * lambda.ln() - ln_gamma(y as f64 + 1.0)).exp()
}
