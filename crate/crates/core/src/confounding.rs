//! Restricted spatial regression (RSR) for the Poisson response: spatial
//! effects constrained to the orthogonal complement of the fixed-effect
//! design, a posterior-predictive variance adjustment (RSR-PPD), and a
//! misspecification simulation study comparing the approaches.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::config::{derive_hyperpriors, ModelConfig, ModelId, SpatialLayout, TruthParams};
use crate::data::{generate_covariates, generate_locations, DesignSpec};
use crate::error::{Error, Result};
use crate::geometry::Location;
use crate::model::{BlockPhiPrior, Dataset, GammaPrior, Hyperpriors, ParameterState};
use crate::sampler::{
    assemble_sample, gamerman_step, ChainConfig, ChainOutput, GlmTarget, PosteriorSample,
};

/// Projector onto the orthogonal complement of the column space of the
/// fixed-effect design (intercept included): symmetric, idempotent, rank
/// n - K.
#[derive(Debug, Clone)]
pub struct ProjectionOperator {
    pub p_perp: DMatrix<f64>,
    pub rank: usize,
}

/// Fixed-effect design matrix [1 | X*] for a dataset.
pub fn design_matrix(data: &Dataset) -> DMatrix<f64> {
    let n = data.n();
    let k = data.n_covariates();
    DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            data.covariates[(i, j - 1)]
        }
    })
}

/// Build I - X (X'X)^{-1} X' through a rank-revealing QR.
pub fn projection(x: &DMatrix<f64>) -> Result<ProjectionOperator> {
    let n = x.nrows();
    let k = x.ncols();
    if k == 0 || n < k {
        return Err(Error::RankDeficientDesign { rank: 0, cols: k });
    }
    let qr = x.clone().col_piv_qr();
    // Rank from the pivoted R diagonal, whose magnitudes are non-increasing.
    let r = qr.r();
    let d0 = r[(0, 0)].abs().max(1e-300);
    let rank = (0..k)
        .take_while(|&i| r[(i, i)].abs() > 1e-10 * d0)
        .count();
    if rank < k {
        return Err(Error::RankDeficientDesign { rank, cols: k });
    }
    let q = qr.q();
    let mut p = DMatrix::identity(n, n);
    // I - Q Q' over the thin factor.
    p.gemm(-1.0, &q, &q.transpose(), 1.0);
    Ok(ProjectionOperator { p_perp: p, rank: n - k })
}

/// Fit the restricted model: the same hierarchy, but the spatial effects
/// enter the linear predictor through the projection onto the residual
/// space of the fixed effects. The unconstrained draws are kept in
/// `z_raw`; the stored states expose the projected effects.
pub fn fit_rsr(
    cfg: &ChainConfig,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<PosteriorSample> {
    let hp = derive_hyperpriors(model, data)?;
    fit_rsr_with(cfg, model, &hp, data)
}

pub fn fit_rsr_with(
    cfg: &ChainConfig,
    model: &ModelConfig,
    hp: &Hyperpriors,
    data: &Dataset,
) -> Result<PosteriorSample> {
    cfg.validate()?;
    if !matches!(model.id, ModelId::M8 | ModelId::M9 | ModelId::M10) {
        return Err(Error::Config(format!(
            "restricted fits are supported for the by-shore spatial structures M8/M9/M10, got {}",
            model.id
        )));
    }
    let layout = SpatialLayout::new(model, &data.locations)?;
    let x_full = design_matrix(data);
    let proj = projection(&x_full)?;
    let outputs: Result<Vec<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|chain| run_rsr_chain(cfg, hp, data, &layout, &proj, chain))
        .collect();
    assemble_sample(
        format!("{}-RSR", model.id),
        cfg,
        data,
        &layout,
        outputs?,
        true,
    )
}

fn run_rsr_chain(
    cfg: &ChainConfig,
    hp: &Hyperpriors,
    data: &Dataset,
    layout: &SpatialLayout,
    proj: &ProjectionOperator,
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(101 + chain as u64);
    let n = data.n();
    let p = data.n_covariates();
    let t = data.n_days;
    let days: Vec<usize> = data.locations.iter().map(|l| l.day_index - 1).collect();

    // Joint coefficient block theta = (alpha*, alpha0, gamma).
    let mut design = DMatrix::zeros(n, p + 1 + t);
    for i in 0..n {
        for j in 0..p {
            design[(i, j)] = data.covariates[(i, j)];
        }
        design[(i, p)] = 1.0;
        design[(i, p + 1 + days[i])] = 1.0;
    }
    let beta_sd = hp.beta_var.sqrt();
    let mut theta = DVector::zeros(p + 1 + t);
    for j in 0..=p {
        theta[j] = rng.sample::<f64, _>(StandardNormal) * beta_sd;
    }
    for _ in 0..200 {
        if (design.columns(0, p + 1) * theta.rows(0, p + 1)).amax() < 400.0 {
            break;
        }
        for j in 0..=p {
            theta[j] *= 0.5;
        }
    }
    let mut tau2 = crate::sampler::inv_gamma_draw(&hp.tau2, &mut rng);
    let mut z_raw = DVector::zeros(n);
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for (b, bl) in layout.blocks.iter().enumerate() {
        let pri = hp.phi.get(b).cloned().unwrap_or(BlockPhiPrior {
            geo: GammaPrior {
                shape: 1.0,
                rate: 1.0,
            },
            depth: None,
        });
        let corr = crate::sampler::init_corr(bl.kind, bl.circle, &pri, &mut rng);
        let sigma2 = crate::sampler::inv_gamma_draw(&hp.sigma2, &mut rng);
        blocks.push(crate::sampler::BlockRun::new(
            bl,
            corr,
            sigma2,
            DVector::zeros(bl.indices.len()),
            cfg,
        )?);
    }
    let mut zeta = &proj.p_perp * &z_raw;
    let mut w_adapt: Vec<crate::sampler::Adapt> = (0..n)
        .map(|_| crate::sampler::Adapt::new(1.0, cfg.adapt_target, cfg.adapt_window))
        .collect();
    let mut w_accepts = vec![(0u64, 0u64); n];
    let mut beta_accepts = (0u64, 0u64);
    let mut draws = Vec::with_capacity(cfg.draws_per_chain());
    let mut scales_freeze = Vec::new();

    for iter in 0..cfg.n_iter {
        let adapting = iter < cfg.burn_in;
        // (alpha*, alpha0, gamma) via the WLS proposal, offset by the
        // projected spatial effects.
        let mut prec = DVector::from_element(p + 1 + t, 1.0 / hp.beta_var);
        for k in 0..t {
            prec[p + 1 + k] = 1.0 / tau2;
        }
        let target = GlmTarget {
            design: &design,
            offset: &zeta,
            prior_prec: &prec,
            counts: &data.counts,
        };
        let (theta_new, accepted) = gamerman_step(&target, &theta, &mut rng);
        theta = theta_new;
        if !adapting {
            beta_accepts.0 += accepted as u64;
            beta_accepts.1 += 1;
        }

        // Sitewise walk on the unconstrained Z; the likelihood sees the
        // move through the projector column.
        let mut eta = &design * &theta + &zeta;
        let mut lambda = eta.map(f64::exp);
        for block in blocks.iter_mut() {
            for j in 0..block.n_sites() {
                let i = block.layout.indices[j];
                let scale = w_adapt[i].scale();
                let d: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
                let pcol = proj.p_perp.column(i);
                let mut dlik = 0.0;
                for k in 0..n {
                    let de = d * pcol[k];
                    let lnew = (eta[k] + de).exp();
                    dlik += -(lnew - lambda[k]) + data.counts[k] as f64 * de;
                }
                let log_accept = dlik + block.site_prior_delta(j, d);
                let accepted = log_accept.is_finite()
                    && rng.random::<f64>().ln() < log_accept;
                if accepted {
                    block.apply_site_change(j, d);
                    z_raw[i] += d;
                    for k in 0..n {
                        let de = d * pcol[k];
                        zeta[k] += de;
                        eta[k] += de;
                        lambda[k] = eta[k].exp();
                    }
                }
                if adapting {
                    w_adapt[i].update(iter + 1, accepted);
                } else {
                    w_accepts[i].0 += accepted as u64;
                    w_accepts[i].1 += 1;
                }
            }
        }

        // Variances and correlation hyperparameters from the raw field.
        for block in blocks.iter_mut() {
            block.draw_sigma2(&hp.sigma2, &mut rng);
        }
        let gamma_norm2 = theta.rows(p + 1, t).norm_squared();
        tau2 = crate::sampler::inv_gamma_draw(
            &crate::model::InvGammaPrior {
                shape: hp.tau2.shape + t as f64 / 2.0,
                scale: hp.tau2.scale + gamma_norm2 / 2.0,
            },
            &mut rng,
        );
        for (b, block) in blocks.iter_mut().enumerate() {
            let pri = hp.phi.get(b).cloned().unwrap_or(BlockPhiPrior {
                geo: GammaPrior {
                    shape: 1.0,
                    rate: 1.0,
                },
                depth: None,
            });
            block.corr_sweep(&pri, &mut rng, iter, adapting);
        }

        if iter + 1 == cfg.burn_in {
            scales_freeze = w_adapt.iter().map(crate::sampler::Adapt::scale).collect();
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in + 1) % cfg.thin == 0 {
            let gamma = DVector::from_fn(t, |k, _| theta[p + 1 + k]);
            let alpha0 = theta[p];
            let mut w = zeta.clone();
            for i in 0..n {
                w[i] += alpha0 + gamma[days[i]];
            }
            draws.push(ParameterState {
                beta0: alpha0,
                beta: DVector::from_fn(p, |j, _| theta[j]),
                gamma,
                w,
                sigma2: blocks.iter().map(|b| b.sigma2).collect(),
                tau2,
                corr: blocks.iter().map(|b| b.corr.clone()).collect(),
                z_raw: Some(z_raw.clone()),
            });
        }
    }
    Ok(ChainOutput {
        draws,
        beta_accepts,
        w_accepts,
        corr_accepts: blocks.iter().flat_map(|b| b.corr_acceptance()).collect(),
        jitter_events: blocks.iter().map(|b| b.jitter_events).sum(),
        w_scales_freeze: scales_freeze,
        w_scales_final: w_adapt.iter().map(crate::sampler::Adapt::scale).collect(),
    })
}

/// Posterior-predictive adjustment: per draw,
/// `beta~ = alpha - (X'X)^{-1} X' Z_raw`, restoring the variance lost to
/// fixed-random collinearity. Returns one adjusted coefficient vector
/// (intercept first) per stored draw.
pub fn rsr_ppd(sample: &PosteriorSample, x_full: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let k = x_full.ncols();
    let xtx = x_full.transpose() * x_full;
    let chol = nalgebra::Cholesky::new(xtx).ok_or(Error::RankDeficientDesign {
        rank: 0,
        cols: k,
    })?;
    sample
        .draws
        .iter()
        .map(|state| {
            let z = state.z_raw.as_ref().ok_or_else(|| {
                Error::Config("posterior sample carries no unconstrained spatial draws".into())
            })?;
            let adjust = chol.solve(&(x_full.transpose() * z));
            let mut coef = DVector::zeros(k);
            coef[0] = state.beta0 - adjust[0];
            for j in 1..k {
                coef[j] = state.beta[j - 1] - adjust[j];
            }
            Ok(coef)
        })
        .collect()
}

/// Posterior mean and central credible interval of one coefficient.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoefficientSummary {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CoefficientSummary {
    pub fn from_draws(draws: &[f64], level: f64) -> Self {
        let mut sorted = draws.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let tail = (1.0 - level) / 2.0;
        CoefficientSummary {
            mean,
            lo: crate::sampler::empirical_quantile(&sorted, tail),
            hi: crate::sampler::empirical_quantile(&sorted, 1.0 - tail),
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn overlaps_zero(&self) -> bool {
        self.covers(0.0)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfoundingRow {
    pub coefficient: String,
    pub sglm: CoefficientSummary,
    pub rsr: CoefficientSummary,
    pub rsr_ppd: CoefficientSummary,
}

/// Side-by-side coefficient summaries under SGLM (beta), RSR (alpha) and
/// RSR-PPD (adjusted beta).
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfoundingReport {
    pub level: f64,
    pub rows: Vec<ConfoundingRow>,
}

impl ConfoundingReport {
    pub const CSV_HEADER: &'static str = "coefficient,approach,mean,lo,hi,width,overlaps_zero";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut out = Vec::new();
        for row in &self.rows {
            for (name, s) in [
                ("SGLM", &row.sglm),
                ("RSR", &row.rsr),
                ("RSR-PPD", &row.rsr_ppd),
            ] {
                out.push(format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    row.coefficient,
                    name,
                    s.mean,
                    s.lo,
                    s.hi,
                    s.width(),
                    s.overlaps_zero()
                ));
            }
        }
        out
    }
}

/// Summarize the covariate coefficients of a matched SGLM fit and RSR fit
/// (with its PPD adjustment) on the same data.
pub fn compare_confounding(
    sglm: &PosteriorSample,
    rsr: &PosteriorSample,
    data: &Dataset,
    level: f64,
) -> Result<ConfoundingReport> {
    let x_full = design_matrix(data);
    let ppd = rsr_ppd(rsr, &x_full)?;
    let k = data.n_covariates();
    let mut rows = Vec::with_capacity(k);
    for j in 1..=k {
        let name = format!("beta{j}");
        let idx_s = sglm
            .name_index(&name)
            .ok_or_else(|| Error::Config(format!("missing column {name}")))?;
        let idx_r = rsr
            .name_index(&name)
            .ok_or_else(|| Error::Config(format!("missing column {name}")))?;
        let ppd_draws: Vec<f64> = ppd.iter().map(|c| c[j]).collect();
        rows.push(ConfoundingRow {
            coefficient: name,
            sglm: CoefficientSummary::from_draws(&sglm.column(idx_s), level),
            rsr: CoefficientSummary::from_draws(&rsr.column(idx_r), level),
            rsr_ppd: CoefficientSummary::from_draws(&ppd_draws, level),
        });
    }
    Ok(ConfoundingReport { level, rows })
}

/// Which hierarchy generates the synthetic data in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GeneratorKind {
    Sglm,
    Rsr,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeneratorKind::Sglm => write!(f, "SGLM"),
            GeneratorKind::Rsr => write!(f, "RSR"),
        }
    }
}

/// Settings for the misspecification study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub design: DesignSpec,
    pub model: ModelConfig,
    pub truth: TruthParams,
    pub smoothness: Vec<f64>,
    pub chain: ChainConfig,
    pub level: f64,
    pub seed: u64,
}

impl StudyConfig {
    /// Desk-scale defaults: n = 100 over 25 days, the M8 structure, reduced
    /// chains.
    pub fn desk_scale(seed: u64) -> Self {
        let design = DesignSpec {
            n_locations: 100,
            n_days: 25,
            span_days: 70,
            cluster_sizes: vec![4; 25],
            alternate_shores: true,
        };
        let model = ModelConfig::new(ModelId::M8);
        let truth = TruthParams {
            beta0: 1.2,
            beta: vec![-(11f64.ln()) / 4.0, 4f64.ln() / 4.0, 0.0, 0.0],
            tau2: 0.05,
            blocks: vec![
                crate::config::BlockTruth {
                    sigma2: 0.5,
                    corr: crate::covariance::CorrelationSpec::Isotropic { phi: 3.5 },
                },
                crate::config::BlockTruth {
                    sigma2: 0.5,
                    corr: crate::covariance::CorrelationSpec::Isotropic { phi: 3.5 },
                },
            ],
        };
        StudyConfig {
            design,
            model,
            truth,
            smoothness: vec![0.95, 0.9, 0.2, 0.2],
            chain: ChainConfig {
                n_iter: 6_000,
                burn_in: 1_500,
                thin: 5,
                n_chains: 1,
                seed,
                ..ChainConfig::default()
            },
            level: 0.95,
            seed,
        }
    }
}

/// One cell of the coverage table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoverageCell {
    pub generator: String,
    pub fitter: String,
    pub coefficient: String,
    pub coverage: f64,
    pub mean_width: f64,
}

pub const COVERAGE_CSV_HEADER: &str = "generator,fitter,coefficient,coverage,mean_width";

pub fn coverage_csv_row(c: &CoverageCell) -> String {
    format!(
        "{},{},{},{:.4},{:.6}",
        c.generator, c.fitter, c.coefficient, c.coverage, c.mean_width
    )
}

/// Generate `n_reps` datasets from the chosen hierarchy, fit SGLM, RSR and
/// RSR-PPD to each, and tabulate coverage of the true coefficients and mean
/// interval widths.
pub fn misspecification_study(
    n_reps: usize,
    generator: GeneratorKind,
    cfg: &StudyConfig,
) -> Result<Vec<CoverageCell>> {
    if n_reps < 20 {
        return Err(Error::Config(format!(
            "the study needs at least 20 replicates, got {n_reps}"
        )));
    }
    let mut loc_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let locs = generate_locations(&cfg.design, &mut loc_rng)?;
    let per_rep: Result<Vec<Vec<(String, [(bool, f64); 3])>>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| study_replicate(rep, generator, cfg, &locs))
        .collect();
    let per_rep = per_rep?;
    let k = cfg.truth.beta.len();
    let fitters = ["SGLM", "RSR", "RSR-PPD"];
    let mut cells = Vec::new();
    for j in 0..k {
        for (f, fitter) in fitters.iter().enumerate() {
            let mut covered = 0usize;
            let mut width_sum = 0.0;
            for rep in &per_rep {
                let (_, stats) = &rep[j];
                covered += stats[f].0 as usize;
                width_sum += stats[f].1;
            }
            cells.push(CoverageCell {
                generator: generator.to_string(),
                fitter: fitter.to_string(),
                coefficient: format!("beta{}", j + 1),
                coverage: covered as f64 / n_reps as f64,
                mean_width: width_sum / n_reps as f64,
            });
        }
    }
    Ok(cells)
}

fn study_replicate(
    rep: usize,
    generator: GeneratorKind,
    cfg: &StudyConfig,
    locs: &[Location],
) -> Result<Vec<(String, [(bool, f64); 3])>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10_000 + rep as u64);
    let data = match generator {
        GeneratorKind::Sglm => {
            crate::data::generate_dataset(&cfg.model, &cfg.truth, locs, &cfg.smoothness, &mut rng)?
        }
        GeneratorKind::Rsr => generate_rsr_dataset(cfg, locs, &mut rng)?,
    };
    let chain = ChainConfig {
        seed: cfg.seed.wrapping_add(rep as u64 * 7919),
        ..cfg.chain.clone()
    };
    let sglm = crate::sampler::run_chains(&chain, &cfg.model, &data)?;
    let rsr = fit_rsr(&chain, &cfg.model, &data)?;
    let report = compare_confounding(&sglm, &rsr, &data, cfg.level)?;
    Ok(report
        .rows
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let truth = cfg.truth.beta[j];
            (
                row.coefficient.clone(),
                [
                    (row.sglm.covers(truth), row.sglm.width()),
                    (row.rsr.covers(truth), row.rsr.width()),
                    (row.rsr_ppd.covers(truth), row.rsr_ppd.width()),
                ],
            )
        })
        .collect())
}

/// Counts from the restricted hierarchy: the spatial field is projected
/// onto the residual space of the realized design before entering the
/// predictor.
fn generate_rsr_dataset<R: Rng>(
    cfg: &StudyConfig,
    locs: &[Location],
    rng: &mut R,
) -> Result<Dataset> {
    let covariates = generate_covariates(locs, &cfg.smoothness, rng)?;
    let n = locs.len();
    let k = covariates.ncols();
    let mut x_full = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        x_full[(i, 0)] = 1.0;
        for j in 0..k {
            x_full[(i, j + 1)] = covariates[(i, j)];
        }
    }
    let proj = projection(&x_full)?;
    let z = crate::data::draw_spatial_effects(&cfg.model, &cfg.truth, locs, rng)?;
    let zeta = &proj.p_perp * &z;
    let n_days = locs.iter().map(|l| l.day_index).max().unwrap_or(0);
    let gamma = DVector::from_fn(n_days, |_, _| {
        let e: f64 = rng.sample::<f64, _>(StandardNormal);
        e * cfg.truth.tau2.max(0.0).sqrt()
    });
    let beta = DVector::from_vec(cfg.truth.beta.clone());
    let mut counts = Vec::with_capacity(n);
    for (i, l) in locs.iter().enumerate() {
        let eta = cfg.truth.beta0
            + covariates.row(i).transpose().dot(&beta)
            + gamma[l.day_index - 1]
            + zeta[i];
        let lambda = eta.exp();
        if !lambda.is_finite() {
            return Err(Error::NonFiniteLinearPredictor(i));
        }
        let y = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|_| Error::NonFiniteLinearPredictor(i))?
                .sample(rng)
        } else {
            0.0
        };
        counts.push(y as u64);
    }
    let mut julian = vec![0u32; n_days];
    for l in locs {
        julian[l.day_index - 1] = l.julian_day;
    }
    Dataset::new(counts, covariates, locs.to_vec(), julian, true)
}
