//! The Poisson-lognormal hierarchy: likelihood, linear predictor, temporal
//! effects, priors, and marginal moments of the count process.
//!
//! Counts are conditionally independent Poisson with
//! `log lambda_i = x_i' beta* + W_i` where `W_i = beta0 + gamma(t_i) + Z_i`;
//! `gamma` is a shared day effect and `Z` the latent spatial effect.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::covariance::CorrelationSpec;
use crate::error::{Error, Result};
use crate::geometry::Location;

/// Observed counts, covariates and sampling layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub counts: Vec<u64>,
    /// n x (K-1) covariate matrix, without the intercept column.
    pub covariates: DMatrix<f64>,
    pub locations: Vec<Location>,
    /// Number of sampling days T.
    pub n_days: usize,
    /// Julian day J(t) for each sampling day, strictly increasing, length T.
    pub julian: Vec<u32>,
    /// Whether covariate columns have been standardized to zero mean and
    /// unit variance.
    pub standardized: bool,
}

impl Dataset {
    pub fn new(
        counts: Vec<u64>,
        covariates: DMatrix<f64>,
        locations: Vec<Location>,
        julian: Vec<u32>,
        standardized: bool,
    ) -> Result<Self> {
        let n = counts.len();
        if locations.len() != n || covariates.nrows() != n {
            return Err(Error::Config(format!(
                "inconsistent sizes: {} counts, {} locations, {} covariate rows",
                n,
                locations.len(),
                covariates.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::Config("empty dataset".into()));
        }
        let n_days = julian.len();
        if !julian.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("julian days must be strictly increasing".into()));
        }
        let mut seen = vec![false; n_days];
        for l in &locations {
            l.validate()?;
            if l.day_index > n_days {
                return Err(Error::Config(format!(
                    "location {}: day_index {} exceeds T = {}",
                    l.id, l.day_index, n_days
                )));
            }
            if l.julian_day != julian[l.day_index - 1] {
                return Err(Error::Config(format!(
                    "location {}: julian_day {} disagrees with day map entry {}",
                    l.id,
                    l.julian_day,
                    julian[l.day_index - 1]
                )));
            }
            seen[l.day_index - 1] = true;
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "sampling day {} has no locations",
                t + 1
            )));
        }
        Ok(Self {
            counts,
            covariates,
            locations,
            n_days,
            julian,
            standardized,
        })
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    /// Number of covariates K-1 (without the intercept).
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Locations per sampling day, (n_1, ..., n_T).
    pub fn day_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_days];
        for l in &self.locations {
            counts[l.day_index - 1] += 1;
        }
        counts
    }

    /// The n x T binary incidence matrix B with B[i, t(s_i)] = 1.
    pub fn temporal_design(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n(), self.n_days);
        for (i, l) in self.locations.iter().enumerate() {
            b[(i, l.day_index - 1)] = 1.0;
        }
        b
    }

    /// Standardize covariate columns in place to zero mean, unit variance.
    pub fn standardize_covariates(&mut self) {
        let n = self.n() as f64;
        for mut col in self.covariates.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let var = col.iter().map(|v| v * v).sum::<f64>() / (n - 1.0).max(1.0);
            if var > 0.0 {
                col.scale_mut(1.0 / var.sqrt());
            }
        }
        self.standardized = true;
    }
}

/// One MCMC state of every model unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub beta0: f64,
    /// Covariate coefficients beta*, length K-1.
    pub beta: DVector<f64>,
    /// Day effects, length T.
    pub gamma: DVector<f64>,
    /// Reparametrized latent field W = beta0 + B gamma + Z, length n.
    pub w: DVector<f64>,
    /// Process variance per spatial block (empty for the no-spatial model).
    pub sigma2: Vec<f64>,
    pub tau2: f64,
    /// Correlation structure (with current hyperparameters) per block.
    pub corr: Vec<CorrelationSpec>,
    /// Raw (unprojected) spatial effects, stored by restricted fits where
    /// the predictor uses the projected field instead.
    pub z_raw: Option<DVector<f64>>,
}

impl ParameterState {
    /// Latent spatial effects Z = W - 1 beta0 - B gamma.
    pub fn z(&self, data: &Dataset) -> DVector<f64> {
        let mut z = self.w.clone();
        for (i, l) in data.locations.iter().enumerate() {
            z[i] -= self.beta0 + self.gamma[l.day_index - 1];
        }
        z
    }

    /// Linear predictor log lambda = X* beta* + W.
    pub fn log_lambda(&self, data: &Dataset) -> DVector<f64> {
        if self.beta.is_empty() {
            self.w.clone()
        } else {
            &data.covariates * &self.beta + &self.w
        }
    }
}

/// Poisson log-likelihood sum_i [-lambda_i + y_i log lambda_i - log(y_i!)],
/// with the normalizing term included so the deviance is absolute.
pub fn log_likelihood(state: &ParameterState, data: &Dataset) -> Result<f64> {
    poisson_log_likelihood(state.log_lambda(data).as_slice(), &data.counts)
}

/// Same, from a precomputed linear predictor.
pub fn poisson_log_likelihood(eta: &[f64], counts: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&e, &y)) in eta.iter().zip(counts.iter()).enumerate() {
        let lambda = e.exp();
        if !e.is_finite() || !lambda.is_finite() {
            return Err(Error::NonFiniteLinearPredictor(i));
        }
        total += -lambda + y as f64 * e - ln_gamma(y as f64 + 1.0);
    }
    Ok(total)
}

/// Log pmf of a single Poisson observation, via log-gamma.
pub fn poisson_log_pmf(y: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -lambda + y as f64 * lambda.ln() - ln_gamma(y as f64 + 1.0)
}

/// Marginal mean vector and covariance matrix of the counts implied by a
/// lognormal mixing distribution: `E(Y) = exp(mu + sigma2/2) = alpha`,
/// `Var(Y) = alpha + alpha^2 (e^{sigma2} - 1)`,
/// `Cov(Y, Y') = alpha alpha' (e^{sigma2 rho} - 1)`.
pub fn marginal_moments(
    mu: &DVector<f64>,
    sigma2: f64,
    rho: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    let alpha: DVector<f64> = mu.map(|m| (m + sigma2 / 2.0).exp());
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = alpha[i] + alpha[i] * alpha[i] * (sigma2.exp_m1());
        for j in (i + 1)..n {
            let c = alpha[i] * alpha[j] * ((sigma2 * rho[(i, j)]).exp_m1());
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    (alpha, cov)
}

/// T x T prior covariance of the day effects: `tau2 * I` under the retained
/// independence structure, or exponential decay in Julian-day separation
/// when `phi_gamma` is given.
pub fn temporal_cov(tau2: f64, phi_gamma: Option<f64>, julian: &[u32]) -> DMatrix<f64> {
    let t = julian.len();
    match phi_gamma {
        None => DMatrix::identity(t, t) * tau2,
        Some(phi) => {
            let mut m = DMatrix::zeros(t, t);
            for a in 0..t {
                for b in 0..t {
                    let d = (julian[a] as f64 - julian[b] as f64).abs();
                    m[(a, b)] = tau2 * (-d / phi).exp();
                }
            }
            m
        }
    }
}

/// Inverse-gamma prior (shape, scale); shape 2 gives infinite variance and
/// mean equal to the scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }
}

/// Gamma prior (shape, rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Pareto log density with the given scale and shape; the anisotropy-ratio
/// prior uses scale 1, shape 2 (mode 1, mean 2, infinite variance).
pub fn pareto_log_density(x: f64, scale: f64, shape: f64) -> f64 {
    if x < scale {
        return f64::NEG_INFINITY;
    }
    shape.ln() + shape * scale.ln() - (shape + 1.0) * x.ln()
}

/// Uniform(0, pi) log density for the anisotropy angle.
pub fn angle_log_density(x: f64) -> f64 {
    if x <= 0.0 || x >= std::f64::consts::PI {
        f64::NEG_INFINITY
    } else {
        -std::f64::consts::PI.ln()
    }
}

/// Per-block decay-parameter priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPhiPrior {
    /// Prior for the geographic decay parameter (phi, or phi1 for the
    /// covariate-in-correlation structure).
    pub geo: GammaPrior,
    /// Prior for the depth decay parameter phi2, when the block uses one.
    pub depth: Option<GammaPrior>,
}

/// Hyperprior settings for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    /// Variance of the zero-mean normal prior on every regression
    /// coefficient (intercept included).
    pub beta_var: f64,
    pub sigma2: InvGammaPrior,
    pub tau2: InvGammaPrior,
    /// One entry per spatial block; empty for the no-spatial model.
    pub phi: Vec<BlockPhiPrior>,
    /// Optional prior for a temporal decay parameter (the fitted models
    /// retain the independence structure, so this is normally `None`).
    pub phi_gamma: Option<GammaPrior>,
    /// Residual variance of the preliminary log-linear fit used to centre
    /// the variance priors, recorded for run metadata.
    pub prelim_residual_var: f64,
}

pub const DEFAULT_BETA_VAR: f64 = 100.0;
pub const DEFAULT_VAR_SHAPE: f64 = 2.0;
pub const DEFAULT_PHI_SHAPE: f64 = 1.0;
/// The prior range rule: P(range <= d_max / 2) = 0.99 with range = 3 phi.
pub const RANGE_PRIOR_PROB: f64 = 0.99;

impl Hyperpriors {
    /// Uninformative-ish defaults with explicit variance scale, for tests
    /// and for models without spatial blocks.
    pub fn with_scales(var_scale: f64) -> Self {
        Hyperpriors {
            beta_var: DEFAULT_BETA_VAR,
            sigma2: InvGammaPrior {
                shape: DEFAULT_VAR_SHAPE,
                scale: var_scale,
            },
            tau2: InvGammaPrior {
                shape: DEFAULT_VAR_SHAPE,
                scale: var_scale,
            },
            phi: Vec::new(),
            phi_gamma: None,
            prelim_residual_var: var_scale,
        }
    }

    /// Gamma prior for a decay parameter whose effective range (3 phi for
    /// the exponential kernel) should stay below half the maximum observed
    /// distance with 99% probability: shape stays at `shape`, the rate is
    /// solved numerically.
    pub fn range_rule_prior(shape: f64, d_max: f64) -> GammaPrior {
        let rate = solve_gamma_rate(shape, (d_max / 6.0).max(1e-12), RANGE_PRIOR_PROB);
        GammaPrior { shape, rate }
    }
}

/// Solve for the rate r such that P(Gamma(shape, r) <= x) = prob.
pub fn solve_gamma_rate(shape: f64, x: f64, prob: f64) -> f64 {
    assert!(shape > 0.0 && x > 0.0 && (0.0..1.0).contains(&prob));
    let mut lo: f64 = 1e-12;
    let mut hi: f64 = 1e15;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if gamma_lr(shape, mid * x) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Joint log prior of a parameter state; `-inf` encodes out-of-support.
pub fn log_prior(state: &ParameterState, hp: &Hyperpriors) -> f64 {
    let mut lp = normal_log_density(state.beta0, hp.beta_var);
    for &b in state.beta.iter() {
        lp += normal_log_density(b, hp.beta_var);
    }
    lp += hp.tau2.log_density(state.tau2);
    for &g in state.gamma.iter() {
        lp += normal_log_density_var(g, state.tau2);
    }
    for &s2 in state.sigma2.iter() {
        lp += hp.sigma2.log_density(s2);
    }
    for (b, corr) in state.corr.iter().enumerate() {
        let pri = hp.phi.get(b);
        match *corr {
            CorrelationSpec::None | CorrelationSpec::Independence => {}
            CorrelationSpec::Isotropic { phi }
            | CorrelationSpec::CircleChord { phi }
            | CorrelationSpec::CircleArc { phi } => {
                if let Some(p) = pri {
                    lp += p.geo.log_density(phi);
                }
            }
            CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
                if let Some(p) = pri {
                    lp += p.geo.log_density(phi);
                }
                lp += angle_log_density(psi_a);
                lp += pareto_log_density(psi_r, 1.0, 2.0);
            }
            CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
                if let Some(p) = pri {
                    lp += p.geo.log_density(phi1);
                    if let Some(d) = &p.depth {
                        lp += d.log_density(phi2);
                    }
                }
            }
        }
    }
    lp
}

fn normal_log_density(x: f64, var: f64) -> f64 {
    normal_log_density_var(x, var)
}

fn normal_log_density_var(x: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

/// Residual variance (on the log scale) of the preliminary log-linear fit:
/// iteratively reweighted least squares of log(y + 0.5) on the design
/// [1 | X*] with Poisson-style weights exp(fitted).
pub fn preliminary_residual_variance(data: &Dataset) -> Result<f64> {
    let n = data.n();
    let k = data.n_covariates() + 1;
    let mut design = DMatrix::zeros(n, k);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..data.n_covariates() {
            design[(i, j + 1)] = data.covariates[(i, j)];
        }
    }
    let u = DVector::from_iterator(n, data.counts.iter().map(|&y| (y as f64 + 0.5).ln()));
    let mut weights = DVector::from_element(n, 1.0);
    let mut fitted = DVector::zeros(n);
    for _ in 0..20 {
        let mut xtwx = DMatrix::zeros(k, k);
        let mut xtwu = DVector::zeros(k);
        for i in 0..n {
            let wi = weights[i];
            let row = design.row(i);
            for a in 0..k {
                xtwu[a] += wi * row[a] * u[i];
                for b in 0..k {
                    xtwx[(a, b)] += wi * row[a] * row[b];
                }
            }
        }
        let chol = nalgebra::Cholesky::new(xtwx).ok_or(Error::SingularCovariance)?;
        let coef = chol.solve(&xtwu);
        fitted = &design * &coef;
        for i in 0..n {
            weights[i] = fitted[i].exp().clamp(1e-8, 1e8);
        }
    }
    let dof = (n as f64 - k as f64).max(1.0);
    let s2 = u
        .iter()
        .zip(fitted.iter())
        .map(|(ui, fi)| (ui - fi).powi(2))
        .sum::<f64>()
        / dof;
    // Floor keeps the variance priors proper even on near-deterministic data.
    Ok(s2.max(0.05))
}
