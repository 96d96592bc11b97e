//! Metropolis-within-Gibbs MCMC for the Poisson-lognormal hierarchy.
//!
//! Per sweep, in fixed order: a weighted-least-squares MH step for the
//! covariate coefficients, sitewise adaptive random-walk MH for the latent
//! field W, closed-form normal draws for the intercept and day effects,
//! inverse-gamma draws for the variances, and random-walk MH (on
//! transformed scales) for the correlation hyperparameters. Chains run
//! independently; the draw stream depends only on (seed, chain index).

mod diagnostics;
mod kernels;

pub use diagnostics::{
    diagnostics, effective_sample_size, split_psrf, DiagnosticsReport, ParamDiagnostics,
    MAX_ESS_INFLATION,
};
pub(crate) use kernels::{gamerman_step, reflect_angle, Adapt, GlmTarget};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Pareto, StandardNormal};
use rayon::prelude::*;

use crate::config::{CircleKernel, CorrKind, ModelConfig, SpatialLayout};
use crate::covariance::{cholesky_jittered, CorrelationSpec};
use crate::error::{Error, Result};
use crate::model::{
    BlockPhiPrior, Dataset, GammaPrior, Hyperpriors, InvGammaPrior, ParameterState,
};

/// Chain protocol: iteration counts, thinning, adaptation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Target acceptance rate for sitewise random-walk steps.
    pub adapt_target: f64,
    /// Robbins-Monro step size decays once per this many iterations.
    pub adapt_window: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 70_000,
            burn_in: 10_000,
            thin: 60,
            n_chains: 2,
            seed: 0,
            adapt_target: 0.44,
            adapt_window: 50,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in {} must be < n_iter {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 || self.n_chains == 0 {
            return Err(Error::Config("thin and n_chains must be >= 1".into()));
        }
        if !(0.0 < self.adapt_target && self.adapt_target < 1.0) {
            return Err(Error::Config("adapt_target must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Post-burn-in acceptance rates per proposal block.
#[derive(Debug, Clone, Default)]
pub struct AcceptanceReport {
    /// Covariate-coefficient (or joint coefficient) MH rate.
    pub beta: f64,
    /// Per-site rates for the latent-field random walk, dataset order.
    pub w_sites: Vec<f64>,
    /// Named correlation-hyperparameter rates, e.g. ("phi_N", 0.41).
    pub corr: Vec<(String, f64)>,
}

/// Thinned post-burn-in draws from every chain, with bookkeeping.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub model: String,
    pub draws: Vec<ParameterState>,
    /// Flattened draws, one row per draw, columns follow `param_names`.
    pub rows: Vec<Vec<f64>>,
    pub param_names: Vec<String>,
    pub draws_per_chain: usize,
    pub n_chains: usize,
    pub acceptance: AcceptanceReport,
    pub jitter_events: usize,
    /// Sitewise proposal scales at the adaptation freeze and at the end of
    /// the first chain; equal by construction once burn-in ends.
    pub w_scales_freeze: Vec<f64>,
    pub w_scales_final: Vec<f64>,
    /// True for restricted (RSR) fits, whose predictor uses the projected
    /// spatial effects while `z_raw` keeps the unconstrained draws.
    pub restricted: bool,
}

impl PosteriorSample {
    pub fn name_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// All draws of one parameter, chains concatenated.
    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[idx]).collect()
    }

    pub fn column_named(&self, name: &str) -> Option<Vec<f64>> {
        self.name_index(name).map(|i| self.column(i))
    }

    /// Per-chain series of one parameter.
    pub fn chain_series(&self, idx: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| {
                let lo = c * self.draws_per_chain;
                let hi = lo + self.draws_per_chain;
                self.rows[lo..hi].iter().map(|r| r[idx]).collect()
            })
            .collect()
    }

    /// Posterior mean of one parameter.
    pub fn mean(&self, idx: usize) -> f64 {
        let col = self.column(idx);
        col.iter().sum::<f64>() / col.len() as f64
    }

    /// Equal-tailed credible interval from the empirical quantiles.
    pub fn credible_interval(&self, idx: usize, level: f64) -> (f64, f64) {
        let mut col = self.column(idx);
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = (1.0 - level) / 2.0;
        (empirical_quantile(&col, lo), empirical_quantile(&col, 1.0 - lo))
    }

    pub fn quantile(&self, idx: usize, q: f64) -> f64 {
        let mut col = self.column(idx);
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        empirical_quantile(&col, q)
    }
}

pub(crate) fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi.min(sorted.len() - 1)] * frac
}

/// Flattened column names for a fitted model's stored draws.
pub fn param_names(data: &Dataset, layout: &SpatialLayout) -> Vec<String> {
    let mut names = vec!["beta0".to_string()];
    for k in 1..=data.n_covariates() {
        names.push(format!("beta{k}"));
    }
    for t in 1..=data.n_days {
        names.push(format!("gamma_{t}"));
    }
    for i in 1..=data.n() {
        names.push(format!("Z_{i}"));
    }
    for b in &layout.blocks {
        names.push(format!("sigma2{}", b.suffix));
    }
    names.push("tau2".to_string());
    for b in &layout.blocks {
        match b.kind {
            CorrKind::None | CorrKind::Independence => {}
            CorrKind::Isotropic | CorrKind::Circle => names.push(format!("phi{}", b.suffix)),
            CorrKind::GeomAniso => {
                names.push(format!("phi{}", b.suffix));
                names.push(format!("psi_A{}", b.suffix));
                names.push(format!("psi_R{}", b.suffix));
            }
            CorrKind::CovariateInCorr => {
                names.push(format!("phi1{}", b.suffix));
                names.push(format!("phi2{}", b.suffix));
            }
        }
    }
    names
}

/// Flatten one state into the `param_names` column order.
pub fn state_row(state: &ParameterState, data: &Dataset) -> Vec<f64> {
    let mut row = Vec::with_capacity(
        1 + state.beta.len() + state.gamma.len() + state.w.len() + state.sigma2.len() + 4,
    );
    row.push(state.beta0);
    row.extend(state.beta.iter());
    row.extend(state.gamma.iter());
    let z = state.z(data);
    row.extend(z.iter());
    row.extend(state.sigma2.iter());
    row.push(state.tau2);
    for corr in &state.corr {
        match *corr {
            CorrelationSpec::None | CorrelationSpec::Independence => {}
            CorrelationSpec::Isotropic { phi }
            | CorrelationSpec::CircleChord { phi }
            | CorrelationSpec::CircleArc { phi } => row.push(phi),
            CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
                row.push(phi);
                row.push(psi_a);
                row.push(psi_r);
            }
            CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
                row.push(phi1);
                row.push(phi2);
            }
        }
    }
    row
}

/// Rebuild a posterior sample from flattened draw rows (the draws-file
/// layout), for scoring and summaries of previously saved fits.
pub fn sample_from_rows(
    model: &ModelConfig,
    data: &Dataset,
    names: &[String],
    rows: Vec<Vec<f64>>,
    draws_per_chain: usize,
    n_chains: usize,
) -> Result<PosteriorSample> {
    let layout = SpatialLayout::new(model, &data.locations)?;
    let expected = param_names(data, &layout);
    if names != expected.as_slice() {
        return Err(Error::Config(format!(
            "draw columns do not match the model and data (expected {} columns, found {})",
            expected.len(),
            names.len()
        )));
    }
    let n = data.n();
    let p = data.n_covariates();
    let t = data.n_days;
    let days: Vec<usize> = data.locations.iter().map(|l| l.day_index - 1).collect();
    let mut draws = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.len() != expected.len() {
            return Err(Error::Config("draw row has the wrong width".into()));
        }
        let mut pos = 0usize;
        let mut take = |k: usize| {
            let slice = &row[pos..pos + k];
            pos += k;
            slice.to_vec()
        };
        let beta0 = take(1)[0];
        let beta = DVector::from_vec(take(p));
        let gamma = DVector::from_vec(take(t));
        let z = DVector::from_vec(take(n));
        let sigma2 = take(layout.blocks.len());
        let tau2 = take(1)[0];
        let mut corr = Vec::with_capacity(layout.blocks.len());
        for b in &layout.blocks {
            let spec = match b.kind {
                CorrKind::None => CorrelationSpec::None,
                CorrKind::Independence => CorrelationSpec::Independence,
                CorrKind::Isotropic => CorrelationSpec::Isotropic { phi: take(1)[0] },
                CorrKind::GeomAniso => {
                    let v = take(3);
                    CorrelationSpec::GeomAniso {
                        phi: v[0],
                        psi_a: v[1],
                        psi_r: v[2],
                    }
                }
                CorrKind::CovariateInCorr => {
                    let v = take(2);
                    CorrelationSpec::CovariateInCorr {
                        phi1: v[0],
                        phi2: v[1],
                    }
                }
                CorrKind::Circle => {
                    let phi = take(1)[0];
                    match b.circle {
                        CircleKernel::Chord => CorrelationSpec::CircleChord { phi },
                        CircleKernel::Arc => CorrelationSpec::CircleArc { phi },
                    }
                }
            };
            corr.push(spec);
        }
        let mut w = z.clone();
        for i in 0..n {
            w[i] += beta0 + gamma[days[i]];
        }
        draws.push(ParameterState {
            beta0,
            beta,
            gamma,
            w,
            sigma2,
            tau2,
            corr,
            z_raw: None,
        });
    }
    Ok(PosteriorSample {
        model: format!("{}", model.id),
        draws,
        rows,
        param_names: expected,
        draws_per_chain,
        n_chains,
        acceptance: AcceptanceReport::default(),
        jitter_events: 0,
        w_scales_freeze: Vec::new(),
        w_scales_final: Vec::new(),
        restricted: false,
    })
}

/// Fit a model with hyperpriors derived from the data (preliminary-fit
/// variance scales, range-rule decay priors).
pub fn run_chains(
    cfg: &ChainConfig,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<PosteriorSample> {
    let hp = crate::config::derive_hyperpriors(model, data)?;
    run_chains_with(cfg, model, &hp, data)
}

/// Fit a model with explicit hyperpriors.
pub fn run_chains_with(
    cfg: &ChainConfig,
    model: &ModelConfig,
    hp: &Hyperpriors,
    data: &Dataset,
) -> Result<PosteriorSample> {
    cfg.validate()?;
    let layout = SpatialLayout::new(model, &data.locations)?;
    let outputs: Result<Vec<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|chain| run_single_chain(cfg, hp, data, &layout, chain))
        .collect();
    let outputs = outputs?;
    assemble_sample(format!("{}", model.id), cfg, data, &layout, outputs, false)
}

pub(crate) struct ChainOutput {
    pub draws: Vec<ParameterState>,
    pub beta_accepts: (u64, u64),
    pub w_accepts: Vec<(u64, u64)>,
    pub corr_accepts: Vec<(String, u64, u64)>,
    pub jitter_events: usize,
    pub w_scales_freeze: Vec<f64>,
    pub w_scales_final: Vec<f64>,
}

pub(crate) fn assemble_sample(
    model: String,
    cfg: &ChainConfig,
    data: &Dataset,
    layout: &SpatialLayout,
    outputs: Vec<ChainOutput>,
    restricted: bool,
) -> Result<PosteriorSample> {
    let names = param_names(data, layout);
    let mut draws = Vec::new();
    let mut rows = Vec::new();
    let mut beta_acc = (0u64, 0u64);
    let n = data.n();
    let mut w_acc = vec![(0u64, 0u64); n];
    let mut corr_acc: Vec<(String, u64, u64)> = Vec::new();
    let mut jitter_events = 0;
    let mut w_scales_freeze = Vec::new();
    let mut w_scales_final = Vec::new();
    for (c, out) in outputs.into_iter().enumerate() {
        for state in &out.draws {
            rows.push(state_row(state, data));
        }
        draws.extend(out.draws);
        beta_acc.0 += out.beta_accepts.0;
        beta_acc.1 += out.beta_accepts.1;
        for (i, acc) in out.w_accepts.iter().enumerate() {
            w_acc[i].0 += acc.0;
            w_acc[i].1 += acc.1;
        }
        for (name, a, p) in out.corr_accepts {
            match corr_acc.iter_mut().find(|(n, _, _)| *n == name) {
                Some(slot) => {
                    slot.1 += a;
                    slot.2 += p;
                }
                None => corr_acc.push((name, a, p)),
            }
        }
        jitter_events += out.jitter_events;
        if c == 0 {
            w_scales_freeze = out.w_scales_freeze;
            w_scales_final = out.w_scales_final;
        }
    }
    let rate = |(a, p): (u64, u64)| if p == 0 { f64::NAN } else { a as f64 / p as f64 };
    let acceptance = AcceptanceReport {
        beta: rate(beta_acc),
        w_sites: if w_acc.iter().all(|&(_, p)| p == 0) {
            Vec::new()
        } else {
            w_acc.into_iter().map(rate).collect()
        },
        corr: corr_acc
            .into_iter()
            .map(|(n, a, p)| (n, rate((a, p))))
            .collect(),
    };
    Ok(PosteriorSample {
        model,
        draws,
        rows,
        param_names: names,
        draws_per_chain: cfg.draws_per_chain(),
        n_chains: cfg.n_chains,
        acceptance,
        jitter_events,
        w_scales_freeze,
        w_scales_final,
        restricted,
    })
}

pub(crate) fn inv_gamma_draw<R: Rng>(pri: &InvGammaPrior, rng: &mut R) -> f64 {
    let g = Gamma::new(pri.shape, 1.0 / pri.scale).expect("valid inverse-gamma prior");
    (1.0 / g.sample(rng)).max(1e-12)
}

pub(crate) fn gamma_prior_draw<R: Rng>(pri: &GammaPrior, rng: &mut R) -> f64 {
    let g = Gamma::new(pri.shape, 1.0 / pri.rate).expect("valid gamma prior");
    g.sample(rng).max(1e-12)
}

/// Initial correlation parameters drawn from the priors (overdispersed
/// starting values).
pub(crate) fn init_corr<R: Rng>(
    kind: CorrKind,
    circle: CircleKernel,
    pri: &BlockPhiPrior,
    rng: &mut R,
) -> CorrelationSpec {
    match kind {
        CorrKind::None => CorrelationSpec::None,
        CorrKind::Independence => CorrelationSpec::Independence,
        CorrKind::Isotropic => CorrelationSpec::Isotropic {
            phi: gamma_prior_draw(&pri.geo, rng),
        },
        CorrKind::GeomAniso => {
            let pareto = Pareto::new(1.0, 2.0).expect("valid pareto");
            let ratio: f64 = pareto.sample(rng);
            CorrelationSpec::GeomAniso {
                phi: gamma_prior_draw(&pri.geo, rng),
                psi_a: rng.random_range(1e-6..(std::f64::consts::PI - 1e-6)),
                psi_r: ratio.max(1.0 + 1e-9),
            }
        }
        CorrKind::CovariateInCorr => CorrelationSpec::CovariateInCorr {
            phi1: gamma_prior_draw(&pri.geo, rng),
            phi2: pri
                .depth
                .as_ref()
                .map(|d| gamma_prior_draw(d, rng))
                .unwrap_or(1.0),
        },
        CorrKind::Circle => {
            let phi = gamma_prior_draw(&pri.geo, rng);
            match circle {
                CircleKernel::Chord => CorrelationSpec::CircleChord { phi },
                CircleKernel::Arc => CorrelationSpec::CircleArc { phi },
            }
        }
    }
}

/// Which hyperparameters a correlation family exposes to MH updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CorrParam {
    Phi,
    Phi2,
    PsiA,
    PsiR,
}

pub(crate) fn tunable_params(kind: CorrKind) -> &'static [CorrParam] {
    match kind {
        CorrKind::None | CorrKind::Independence => &[],
        CorrKind::Isotropic | CorrKind::Circle => &[CorrParam::Phi],
        CorrKind::GeomAniso => &[CorrParam::Phi, CorrParam::PsiA, CorrParam::PsiR],
        CorrKind::CovariateInCorr => &[CorrParam::Phi, CorrParam::Phi2],
    }
}

pub(crate) fn corr_param_name(kind: CorrKind, p: CorrParam, suffix: &str) -> String {
    match (kind, p) {
        (CorrKind::CovariateInCorr, CorrParam::Phi) => format!("phi1{suffix}"),
        (_, CorrParam::Phi) => format!("phi{suffix}"),
        (_, CorrParam::Phi2) => format!("phi2{suffix}"),
        (_, CorrParam::PsiA) => format!("psi_A{suffix}"),
        (_, CorrParam::PsiR) => format!("psi_R{suffix}"),
    }
}

/// One Gaussian-process block inside a running chain: factorized
/// correlation matrix, the local latent residual, and adaptation state for
/// its hyperparameters.
pub(crate) struct BlockRun<'a> {
    pub layout: &'a crate::config::BlockLayout,
    pub corr: CorrelationSpec,
    pub sigma2: f64,
    pub z: DVector<f64>,
    rinv: DMatrix<f64>,
    log_det: f64,
    rinv_sum: f64,
    rinv_rowsum: DVector<f64>,
    u: DVector<f64>,
    quad: f64,
    scales: Vec<Adapt>,
    accepts: Vec<(u64, u64)>,
    pub jitter_events: usize,
}

impl<'a> BlockRun<'a> {
    pub fn new(
        layout: &'a crate::config::BlockLayout,
        corr: CorrelationSpec,
        sigma2: f64,
        z: DVector<f64>,
        cfg: &ChainConfig,
    ) -> Result<Self> {
        let n_params = tunable_params(layout.kind).len();
        let mut block = BlockRun {
            layout,
            corr,
            sigma2,
            z,
            rinv: DMatrix::identity(0, 0),
            log_det: 0.0,
            rinv_sum: 0.0,
            rinv_rowsum: DVector::zeros(0),
            u: DVector::zeros(0),
            quad: 0.0,
            scales: (0..n_params)
                .map(|_| Adapt::new(0.5, cfg.adapt_target, cfg.adapt_window))
                .collect(),
            accepts: vec![(0, 0); n_params],
            jitter_events: 0,
        };
        block.refactor()?;
        Ok(block)
    }

    pub fn n_sites(&self) -> usize {
        self.layout.indices.len()
    }

    /// Factor the current correlation matrix and refresh every derived
    /// quantity.
    fn refactor(&mut self) -> Result<()> {
        let r = self.layout.cache.corr_matrix(&self.corr)?;
        let chol = cholesky_jittered(&r)?;
        if chol.jitter > 0.0 {
            self.jitter_events += 1;
        }
        self.log_det = chol.log_det();
        self.rinv = chol.factor.inverse();
        self.rinv_rowsum = DVector::from_iterator(
            self.rinv.nrows(),
            self.rinv.row_iter().map(|row| row.sum()),
        );
        self.rinv_sum = self.rinv_rowsum.sum();
        self.refresh_quadratics();
        Ok(())
    }

    /// Recompute u = R^{-1} z and the quadratic form after z changed.
    pub fn refresh_quadratics(&mut self) {
        self.u = &self.rinv * &self.z;
        self.quad = self.z.dot(&self.u);
    }

    pub fn set_z(&mut self, z: DVector<f64>) {
        self.z = z;
        self.refresh_quadratics();
    }

    pub fn rinv_sum(&self) -> f64 {
        self.rinv_sum
    }

    pub fn rinv_rowsum(&self) -> &DVector<f64> {
        &self.rinv_rowsum
    }

    pub fn rinv(&self) -> &DMatrix<f64> {
        &self.rinv
    }

    /// Change in the log Gaussian prior when local site `j` moves by `d`.
    pub fn site_prior_delta(&self, j: usize, d: f64) -> f64 {
        -(d * self.u[j] + 0.5 * d * d * self.rinv[(j, j)]) / self.sigma2
    }

    /// Commit a sitewise move, keeping u and the quadratic form in sync.
    pub fn apply_site_change(&mut self, j: usize, d: f64) {
        self.quad += 2.0 * d * self.u[j] + d * d * self.rinv[(j, j)];
        self.z[j] += d;
        let col = self.rinv.column(j).into_owned();
        self.u.axpy(d, &col, 1.0);
    }

    /// Conjugate inverse-gamma draw for this block's process variance.
    pub fn draw_sigma2<R: Rng>(&mut self, pri: &InvGammaPrior, rng: &mut R) {
        self.sigma2 = inv_gamma_draw(&sigma2_posterior(pri, self.n_sites(), self.quad), rng);
    }

    /// One random-walk MH pass over this block's correlation
    /// hyperparameters; rebuilds and refactorizes on acceptance.
    pub fn corr_sweep<R: Rng>(
        &mut self,
        pri: &BlockPhiPrior,
        rng: &mut R,
        iter: usize,
        adapting: bool,
    ) {
        let params = tunable_params(self.layout.kind);
        for (k, &param) in params.iter().enumerate() {
            let scale = self.scales[k].scale();
            let step: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
            let candidate = perturb_corr(&self.corr, param, step);
            let accepted = self.try_corr_move(pri, &candidate, rng);
            if adapting {
                self.scales[k].update(iter + 1, accepted);
            } else {
                self.accepts[k].0 += accepted as u64;
                self.accepts[k].1 += 1;
            }
        }
    }

    fn try_corr_move<R: Rng>(
        &mut self,
        pri: &BlockPhiPrior,
        candidate: &CorrelationSpec,
        rng: &mut R,
    ) -> bool {
        if candidate.validate().is_err() {
            return false;
        }
        let r = match self.layout.cache.corr_matrix(candidate) {
            Ok(r) => r,
            Err(_) => return false,
        };
        // A candidate that cannot be factorized is simply rejected.
        let chol = match cholesky_jittered(&r) {
            Ok(c) => c,
            Err(_) => return false,
        };
        let u_new = chol.factor.solve(&self.z);
        let quad_new = self.z.dot(&u_new);
        let log_det_new = chol.log_det();
        let current = corr_log_target(self.sigma2, pri, &self.corr, self.log_det, self.quad);
        let proposed = corr_log_target(self.sigma2, pri, candidate, log_det_new, quad_new);
        let log_accept = proposed - current;
        if log_accept.is_finite() && rng.random::<f64>().ln() < log_accept {
            if chol.jitter > 0.0 {
                self.jitter_events += 1;
            }
            self.corr = candidate.clone();
            self.log_det = log_det_new;
            self.rinv = chol.factor.inverse();
            self.rinv_rowsum = DVector::from_iterator(
                self.rinv.nrows(),
                self.rinv.row_iter().map(|row| row.sum()),
            );
            self.rinv_sum = self.rinv_rowsum.sum();
            self.u = u_new;
            self.quad = quad_new;
            true
        } else {
            false
        }
    }

    pub fn corr_acceptance(&self) -> Vec<(String, u64, u64)> {
        tunable_params(self.layout.kind)
            .iter()
            .zip(&self.accepts)
            .map(|(&p, &(a, n))| {
                (
                    corr_param_name(self.layout.kind, p, &self.layout.suffix),
                    a,
                    n,
                )
            })
            .collect()
    }
}

/// Gaussian log density (up to constants) of z under a candidate
/// correlation structure, plus the hyperparameter priors and the
/// log-transform volume terms: -(log det R + quad/sigma2)/2 + prior + volume.
fn corr_log_target(
    sigma2: f64,
    pri: &BlockPhiPrior,
    corr: &CorrelationSpec,
    log_det: f64,
    quad: f64,
) -> f64 {
    -0.5 * (log_det + quad / sigma2) + corr_log_prior(corr, pri) + corr_log_volume(corr)
}

fn corr_log_prior(corr: &CorrelationSpec, pri: &BlockPhiPrior) -> f64 {
    use crate::model::{angle_log_density, pareto_log_density};
    match *corr {
        CorrelationSpec::None | CorrelationSpec::Independence => 0.0,
        CorrelationSpec::Isotropic { phi }
        | CorrelationSpec::CircleChord { phi }
        | CorrelationSpec::CircleArc { phi } => pri.geo.log_density(phi),
        CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
            pri.geo.log_density(phi)
                + angle_log_density(psi_a)
                + pareto_log_density(psi_r, 1.0, 2.0)
        }
        CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
            pri.geo.log_density(phi1)
                + pri
                    .depth
                    .as_ref()
                    .map(|d| d.log_density(phi2))
                    .unwrap_or(0.0)
        }
    }
}

/// Log volume terms of the transforms the random walks run on: log phi for
/// positive parameters, log(psi_r - 1) for the ratio. Terms for parameters
/// not being moved cancel in the MH ratio.
fn corr_log_volume(corr: &CorrelationSpec) -> f64 {
    match *corr {
        CorrelationSpec::None | CorrelationSpec::Independence => 0.0,
        CorrelationSpec::Isotropic { phi }
        | CorrelationSpec::CircleChord { phi }
        | CorrelationSpec::CircleArc { phi } => phi.ln(),
        CorrelationSpec::GeomAniso { phi, psi_r, .. } => {
            phi.ln() + (psi_r - 1.0).max(1e-300).ln()
        }
        CorrelationSpec::CovariateInCorr { phi1, phi2 } => phi1.ln() + phi2.ln(),
    }
}

/// Move one hyperparameter by `step` on its transformed scale.
fn perturb_corr(corr: &CorrelationSpec, param: CorrParam, step: f64) -> CorrelationSpec {
    let mut out = corr.clone();
    match (&mut out, param) {
        (CorrelationSpec::Isotropic { phi }, CorrParam::Phi)
        | (CorrelationSpec::CircleChord { phi }, CorrParam::Phi)
        | (CorrelationSpec::CircleArc { phi }, CorrParam::Phi)
        | (CorrelationSpec::GeomAniso { phi, .. }, CorrParam::Phi)
        | (CorrelationSpec::CovariateInCorr { phi1: phi, .. }, CorrParam::Phi) => {
            *phi = (phi.ln() + step).exp();
        }
        (CorrelationSpec::CovariateInCorr { phi2, .. }, CorrParam::Phi2) => {
            *phi2 = (phi2.ln() + step).exp();
        }
        (CorrelationSpec::GeomAniso { psi_a, .. }, CorrParam::PsiA) => {
            *psi_a = reflect_angle(*psi_a + step);
        }
        (CorrelationSpec::GeomAniso { psi_r, .. }, CorrParam::PsiR) => {
            *psi_r = 1.0 + ((*psi_r - 1.0).max(1e-300).ln() + step).exp();
        }
        _ => {}
    }
    out
}

fn run_single_chain(
    cfg: &ChainConfig,
    hp: &Hyperpriors,
    data: &Dataset,
    layout: &SpatialLayout,
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + chain as u64);
    let mut runner = Runner::init(cfg, hp, data, layout, chain, rng)?;
    let mut draws = Vec::with_capacity(cfg.draws_per_chain());
    let mut scales_freeze = Vec::new();
    for iter in 0..cfg.n_iter {
        runner.sweep(iter).map_err(|e| Error::Sampler {
            iter,
            source: Box::new(e),
        })?;
        if iter + 1 == cfg.burn_in {
            scales_freeze = runner.w_scales();
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in + 1) % cfg.thin == 0 {
            draws.push(runner.snapshot());
        }
    }
    Ok(ChainOutput {
        draws,
        beta_accepts: runner.beta_accepts,
        w_accepts: runner.w_accepts.clone(),
        corr_accepts: runner
            .blocks
            .iter()
            .flat_map(|b| b.corr_acceptance())
            .collect(),
        jitter_events: runner.blocks.iter().map(|b| b.jitter_events).sum(),
        w_scales_freeze: scales_freeze,
        w_scales_final: runner.w_scales(),
    })
}

/// The update blocks of one Gibbs sweep, in their default order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepStep {
    Beta,
    WSites,
    Beta0,
    Gamma,
    Sigma2,
    Tau2,
    Corr,
}

const DEFAULT_SWEEP: [SweepStep; 7] = [
    SweepStep::Beta,
    SweepStep::WSites,
    SweepStep::Beta0,
    SweepStep::Gamma,
    SweepStep::Sigma2,
    SweepStep::Tau2,
    SweepStep::Corr,
];

struct Runner<'a> {
    cfg: &'a ChainConfig,
    hp: &'a Hyperpriors,
    data: &'a Dataset,
    days: Vec<usize>,
    beta0: f64,
    beta: DVector<f64>,
    gamma: DVector<f64>,
    w: DVector<f64>,
    tau2: f64,
    eta: DVector<f64>,
    lambda: DVector<f64>,
    blocks: Vec<BlockRun<'a>>,
    w_adapt: Vec<Adapt>,
    w_accepts: Vec<(u64, u64)>,
    beta_accepts: (u64, u64),
    beta_prec: DVector<f64>,
    m0_design: Option<DMatrix<f64>>,
    sweep_order: [SweepStep; 7],
    rng: ChaCha20Rng,
}

impl<'a> Runner<'a> {
    fn init(
        cfg: &'a ChainConfig,
        hp: &'a Hyperpriors,
        data: &'a Dataset,
        layout: &'a SpatialLayout,
        chain: usize,
        mut rng: ChaCha20Rng,
    ) -> Result<Self> {
        let n = data.n();
        let p = data.n_covariates();
        let t = data.n_days;
        let days: Vec<usize> = data.locations.iter().map(|l| l.day_index - 1).collect();
        let beta_sd = hp.beta_var.sqrt();
        let mut beta = DVector::from_fn(p, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * beta_sd
        });
        let mut beta0 = rng.sample::<f64, _>(StandardNormal) * beta_sd;
        let gamma = DVector::zeros(t);
        let tau2 = inv_gamma_draw(&hp.tau2, &mut rng);
        let spatial = !layout.blocks.is_empty();
        // Overdispersed start: W at log(y + 0.5) plus an alternating
        // chain-index offset.
        let offset = 0.5 * chain as f64 * if chain % 2 == 0 { 1.0 } else { -1.0 };
        let mut w = DVector::from_fn(n, |i, _| (data.counts[i] as f64 + 0.5).ln() + offset);
        if !spatial {
            for i in 0..n {
                w[i] = beta0 + gamma[days[i]];
            }
        }
        // Shrink wild coefficient draws until the predictor is finite.
        for _ in 0..200 {
            let eta_max = (0..n)
                .map(|i| {
                    let xb = if p > 0 { data.covariates.row(i).transpose().dot(&beta) } else { 0.0 };
                    xb + w[i]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if eta_max < 500.0 {
                break;
            }
            beta *= 0.5;
            if !spatial {
                beta0 *= 0.5;
                for i in 0..n {
                    w[i] = beta0 + gamma[days[i]];
                }
            }
        }
        let eta = if p > 0 {
            &data.covariates * &beta + &w
        } else {
            w.clone()
        };
        let lambda = eta.map(f64::exp);
        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for (b, bl) in layout.blocks.iter().enumerate() {
            let pri = hp.phi.get(b).cloned().unwrap_or(BlockPhiPrior {
                geo: GammaPrior {
                    shape: 1.0,
                    rate: 1.0,
                },
                depth: None,
            });
            let corr = init_corr(bl.kind, bl.circle, &pri, &mut rng);
            let sigma2 = inv_gamma_draw(&hp.sigma2, &mut rng);
            let z = DVector::from_fn(bl.indices.len(), |j, _| {
                let i = bl.indices[j];
                w[i] - beta0 - gamma[days[i]]
            });
            blocks.push(BlockRun::new(bl, corr, sigma2, z, cfg)?);
        }
        let m0_design = if spatial {
            None
        } else {
            let mut d = DMatrix::zeros(n, p + 1 + t);
            for i in 0..n {
                for j in 0..p {
                    d[(i, j)] = data.covariates[(i, j)];
                }
                d[(i, p)] = 1.0;
                d[(i, p + 1 + days[i])] = 1.0;
            }
            Some(d)
        };
        Ok(Runner {
            cfg,
            hp,
            data,
            days,
            beta0,
            beta,
            gamma,
            w,
            tau2,
            eta,
            lambda,
            blocks,
            w_adapt: (0..n)
                .map(|_| Adapt::new(1.0, cfg.adapt_target, cfg.adapt_window))
                .collect(),
            w_accepts: vec![(0, 0); n],
            beta_accepts: (0, 0),
            beta_prec: DVector::from_element(p, 1.0 / hp.beta_var),
            m0_design,
            sweep_order: DEFAULT_SWEEP,
            rng,
        })
    }

    fn w_scales(&self) -> Vec<f64> {
        self.w_adapt.iter().map(Adapt::scale).collect()
    }

    fn snapshot(&self) -> ParameterState {
        ParameterState {
            beta0: self.beta0,
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            w: self.w.clone(),
            sigma2: self.blocks.iter().map(|b| b.sigma2).collect(),
            tau2: self.tau2,
            corr: self.blocks.iter().map(|b| b.corr.clone()).collect(),
            z_raw: None,
        }
    }

    fn sweep(&mut self, iter: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return self.sweep_m0(iter);
        }
        let adapting = iter < self.cfg.burn_in;
        for step in self.sweep_order {
            match step {
                SweepStep::Beta => self.step_beta(adapting),
                SweepStep::WSites => {
                    self.refresh_block_z();
                    self.step_w_sites(iter, adapting);
                }
                SweepStep::Beta0 => self.step_beta0()?,
                SweepStep::Gamma => self.step_gamma()?,
                SweepStep::Sigma2 => {
                    self.refresh_block_z();
                    for b in 0..self.blocks.len() {
                        self.blocks[b].draw_sigma2(&self.hp.sigma2, &mut self.rng);
                    }
                }
                SweepStep::Tau2 => self.step_tau2(),
                SweepStep::Corr => {
                    self.refresh_block_z();
                    for b in 0..self.blocks.len() {
                        let pri = self.hp.phi.get(b).cloned().unwrap_or(BlockPhiPrior {
                            geo: GammaPrior {
                                shape: 1.0,
                                rate: 1.0,
                            },
                            depth: None,
                        });
                        let rng = &mut self.rng;
                        self.blocks[b].corr_sweep(&pri, rng, iter, adapting);
                    }
                }
            }
        }
        Ok(())
    }

    /// No-spatial baseline: one joint WLS step for (beta*, beta0, gamma),
    /// then the conjugate tau^2 draw.
    fn sweep_m0(&mut self, iter: usize) -> Result<()> {
        let adapting = iter < self.cfg.burn_in;
        let design = self.m0_design.as_ref().expect("M0 design");
        let p = self.beta.len();
        let t = self.data.n_days;
        let mut theta = DVector::zeros(p + 1 + t);
        for j in 0..p {
            theta[j] = self.beta[j];
        }
        theta[p] = self.beta0;
        for k in 0..t {
            theta[p + 1 + k] = self.gamma[k];
        }
        let mut prec = DVector::from_element(p + 1 + t, 1.0 / self.hp.beta_var);
        for k in 0..t {
            prec[p + 1 + k] = 1.0 / self.tau2;
        }
        let offset = DVector::zeros(self.data.n());
        let target = GlmTarget {
            design,
            offset: &offset,
            prior_prec: &prec,
            counts: &self.data.counts,
        };
        let (theta, accepted) = gamerman_step(&target, &theta, &mut self.rng);
        if !adapting {
            self.beta_accepts.0 += accepted as u64;
            self.beta_accepts.1 += 1;
        }
        for j in 0..p {
            self.beta[j] = theta[j];
        }
        self.beta0 = theta[p];
        for k in 0..t {
            self.gamma[k] = theta[p + 1 + k];
        }
        for i in 0..self.data.n() {
            self.w[i] = self.beta0 + self.gamma[self.days[i]];
        }
        self.recompute_predictor();
        self.step_tau2();
        Ok(())
    }

    fn recompute_predictor(&mut self) {
        self.eta = if self.beta.is_empty() {
            self.w.clone()
        } else {
            &self.data.covariates * &self.beta + &self.w
        };
        self.lambda = self.eta.map(f64::exp);
    }

    fn step_beta(&mut self, adapting: bool) {
        if self.beta.is_empty() {
            return;
        }
        let target = GlmTarget {
            design: &self.data.covariates,
            offset: &self.w,
            prior_prec: &self.beta_prec,
            counts: &self.data.counts,
        };
        let (beta, accepted) = gamerman_step(&target, &self.beta, &mut self.rng);
        if accepted {
            self.beta = beta;
            self.recompute_predictor();
        }
        if !adapting {
            self.beta_accepts.0 += accepted as u64;
            self.beta_accepts.1 += 1;
        }
    }

    /// Sync every block's local residual z = w - beta0 - B gamma.
    fn refresh_block_z(&mut self) {
        for block in &mut self.blocks {
            let z = DVector::from_fn(block.layout.indices.len(), |j, _| {
                let i = block.layout.indices[j];
                self.w[i] - self.beta0 - self.gamma[self.days[i]]
            });
            block.set_z(z);
        }
    }

    fn step_w_sites(&mut self, iter: usize, adapting: bool) {
        let Runner {
            data,
            blocks,
            w,
            eta,
            lambda,
            w_adapt,
            w_accepts,
            rng,
            ..
        } = self;
        for block in blocks.iter_mut() {
            for j in 0..block.n_sites() {
                let i = block.layout.indices[j];
                let scale = w_adapt[i].scale();
                let d: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
                let lambda_new = (eta[i] + d).exp();
                let mut log_accept = if lambda_new.is_finite() {
                    -(lambda_new - lambda[i]) + data.counts[i] as f64 * d
                } else {
                    f64::NEG_INFINITY
                };
                log_accept += block.site_prior_delta(j, d);
                let accepted =
                    log_accept.is_finite() && rng.random::<f64>().ln() < log_accept;
                if accepted {
                    block.apply_site_change(j, d);
                    w[i] += d;
                    eta[i] += d;
                    lambda[i] = lambda_new;
                }
                if adapting {
                    w_adapt[i].update(iter + 1, accepted);
                } else {
                    w_accepts[i].0 += accepted as u64;
                    w_accepts[i].1 += 1;
                }
            }
        }
    }

    /// Normal full conditional of the intercept: precision
    /// 1' Sigma^{-1} 1 + 1/v, mean solving it against 1' Sigma^{-1} (W - B gamma).
    fn beta0_conditional(&self) -> Result<(f64, f64)> {
        let mut prec = 1.0 / self.hp.beta_var;
        let mut rhs = 0.0;
        for block in &self.blocks {
            prec += block.rinv_sum() / block.sigma2;
            let resid = DVector::from_fn(block.n_sites(), |j, _| {
                let i = block.layout.indices[j];
                self.w[i] - self.gamma[self.days[i]]
            });
            rhs += block.rinv_rowsum().dot(&resid) / block.sigma2;
        }
        if !(prec > 0.0) || !prec.is_finite() {
            return Err(Error::SingularCovariance);
        }
        Ok((rhs / prec, 1.0 / prec))
    }

    fn step_beta0(&mut self) -> Result<()> {
        let (mean, var) = self.beta0_conditional()?;
        self.beta0 = mean + self.rng.sample::<f64, _>(StandardNormal) * var.sqrt();
        Ok(())
    }

    /// Joint normal full conditional of the day effects: precision
    /// B' Sigma^{-1} B + I/tau2, mean solving it against B' Sigma^{-1} (W - 1 beta0).
    fn gamma_conditional(&self) -> Result<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        let t = self.data.n_days;
        let mut precision = DMatrix::zeros(t, t);
        let mut rhs = DVector::zeros(t);
        for block in &self.blocks {
            let resid = DVector::from_fn(block.n_sites(), |j, _| {
                let i = block.layout.indices[j];
                self.w[i] - self.beta0
            });
            let v = block.rinv() * &resid;
            for j in 0..block.n_sites() {
                let tj = self.days[block.layout.indices[j]];
                rhs[tj] += v[j] / block.sigma2;
                for k in 0..block.n_sites() {
                    let tk = self.days[block.layout.indices[k]];
                    precision[(tj, tk)] += block.rinv()[(j, k)] / block.sigma2;
                }
            }
        }
        for k in 0..t {
            precision[(k, k)] += 1.0 / self.tau2;
        }
        let chol = nalgebra::Cholesky::new(precision).ok_or(Error::SingularCovariance)?;
        let mean = chol.solve(&rhs);
        Ok((mean, chol))
    }

    fn step_gamma(&mut self) -> Result<()> {
        let t = self.data.n_days;
        let (mean, chol) = self.gamma_conditional()?;
        let xi = DVector::from_fn(t, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let step = chol
            .l_dirty()
            .transpose()
            .solve_upper_triangular(&xi)
            .ok_or(Error::SingularCovariance)?;
        self.gamma = mean + step;
        Ok(())
    }

    fn step_tau2(&mut self) {
        let t = self.data.n_days as f64;
        let shape = self.hp.tau2.shape + t / 2.0;
        let scale = self.hp.tau2.scale + self.gamma.norm_squared() / 2.0;
        self.tau2 = inv_gamma_draw(&InvGammaPrior { shape, scale }, &mut self.rng);
    }
}

/// Inverse-gamma posterior of a block variance given its quadratic form.
pub(crate) fn sigma2_posterior(pri: &InvGammaPrior, n_sites: usize, quad: f64) -> InvGammaPrior {
    InvGammaPrior {
        shape: pri.shape + n_sites as f64 / 2.0,
        scale: pri.scale + quad / 2.0,
    }
}
