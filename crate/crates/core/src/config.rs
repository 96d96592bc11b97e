//! Model identifiers M0-M10, the spatial layout they induce on a location
//! set, hyperprior derivation, and run configuration.

use serde::{Deserialize, Serialize};

use crate::covariance::{CorrelationSpec, PairwiseCache, Projection, SpatialPoint};
use crate::error::{Error, Result};
use crate::geometry::{Location, Shore};
use crate::model::{
    preliminary_residual_variance, BlockPhiPrior, Dataset, Hyperpriors, InvGammaPrior,
    DEFAULT_BETA_VAR, DEFAULT_PHI_SHAPE, DEFAULT_VAR_SHAPE,
};

/// The eleven model variants: a spatial domain paired with a correlation
/// structure.
///
/// |            | none | indep. | isotropic | geom. aniso. | covariate |
/// |------------|------|--------|-----------|--------------|-----------|
/// | whole lake | M0   | M1     | M2        | M3           | M4        |
/// | circle     |      |        | M5, M6    |              |           |
/// | by shore   |      | M7     | M8        | M9           | M10       |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
}

impl ModelId {
    pub const ALL: [ModelId; 11] = [
        ModelId::M0,
        ModelId::M1,
        ModelId::M2,
        ModelId::M3,
        ModelId::M4,
        ModelId::M5,
        ModelId::M6,
        ModelId::M7,
        ModelId::M8,
        ModelId::M9,
        ModelId::M10,
    ];

    pub fn domain_kind(&self) -> DomainKind {
        match self {
            ModelId::M0 | ModelId::M1 | ModelId::M2 | ModelId::M3 | ModelId::M4 => {
                DomainKind::WholeLake
            }
            ModelId::M5 => DomainKind::Circle(Projection::EllipseFit),
            ModelId::M6 => DomainKind::Circle(Projection::Centroid),
            ModelId::M7 | ModelId::M8 | ModelId::M9 | ModelId::M10 => DomainKind::ByShore,
        }
    }

    pub fn corr_kind(&self) -> CorrKind {
        match self {
            ModelId::M0 => CorrKind::None,
            ModelId::M1 | ModelId::M7 => CorrKind::Independence,
            ModelId::M2 | ModelId::M8 => CorrKind::Isotropic,
            ModelId::M3 | ModelId::M9 => CorrKind::GeomAniso,
            ModelId::M4 | ModelId::M10 => CorrKind::CovariateInCorr,
            ModelId::M5 | ModelId::M6 => CorrKind::Circle,
        }
    }

    /// Human-readable correlation-structure label (report column).
    pub fn structure_label(&self) -> &'static str {
        match self.corr_kind() {
            CorrKind::None => "None",
            CorrKind::Independence => "Independence",
            CorrKind::Isotropic => "Isotropy",
            CorrKind::GeomAniso => "Anisotropy - Geom.",
            CorrKind::CovariateInCorr => "Anisotropy - Cov. in cor.",
            CorrKind::Circle => "Isotropy",
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "M{}", *self as usize)
    }
}

impl std::str::FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        ModelId::ALL
            .iter()
            .find(|m| format!("{m}") == t)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown model id {s:?} (expected M0..M10)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    WholeLake,
    Circle(Projection),
    ByShore,
}

/// Correlation-structure family, without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    None,
    Independence,
    Isotropic,
    GeomAniso,
    CovariateInCorr,
    Circle,
}

/// Which exponential kernel the circular models use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CircleKernel {
    /// exp(-chord / phi), the default.
    Chord,
    /// exp(-arc / phi), exposed for parity checks.
    Arc,
}

impl Default for CircleKernel {
    fn default() -> Self {
        CircleKernel::Chord
    }
}

/// A model choice ready to fit: the id plus the circular-kernel option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: ModelId,
    #[serde(default)]
    pub circle: CircleKernel,
}

impl ModelConfig {
    pub fn new(id: ModelId) -> Self {
        Self {
            id,
            circle: CircleKernel::default(),
        }
    }
}

impl From<ModelId> for ModelConfig {
    fn from(id: ModelId) -> Self {
        ModelConfig::new(id)
    }
}

/// One Gaussian-process block of the spatial layout: the sites it owns (in
/// dataset order), their cached pairwise distances, and the correlation
/// family fitted on it.
pub struct BlockLayout {
    pub shore: Option<Shore>,
    pub indices: Vec<usize>,
    pub cache: PairwiseCache,
    pub kind: CorrKind,
    pub circle: CircleKernel,
    /// Column-name suffix: empty for a single block, "_N"/"_S" by shore.
    pub suffix: String,
}

impl BlockLayout {
    /// Largest effective distance between two sites of this block, in the
    /// metric the correlation function actually uses.
    pub fn max_effective_distance(&self) -> f64 {
        match self.kind {
            CorrKind::Circle => match self.circle {
                CircleKernel::Chord => {
                    let omega = self.cache.max_omega().unwrap_or(0.0);
                    crate::geometry::chord_distance(omega, 1.0)
                }
                CircleKernel::Arc => self.cache.max_omega().unwrap_or(0.0),
            },
            _ => self.cache.max_geo_distance(),
        }
    }
}

/// The per-block decomposition a model induces on a set of locations.
pub struct SpatialLayout {
    pub blocks: Vec<BlockLayout>,
}

impl SpatialLayout {
    pub fn new(model: &ModelConfig, locs: &[Location]) -> Result<Self> {
        let blocks = match model.id.domain_kind() {
            DomainKind::WholeLake => {
                if model.id.corr_kind() == CorrKind::None {
                    Vec::new()
                } else {
                    let pts: Vec<SpatialPoint> = locs.iter().map(SpatialPoint::from).collect();
                    vec![BlockLayout {
                        shore: None,
                        indices: (0..locs.len()).collect(),
                        cache: PairwiseCache::new(&pts),
                        kind: model.id.corr_kind(),
                        circle: model.circle,
                        suffix: String::new(),
                    }]
                }
            }
            DomainKind::Circle(projection) => {
                let circle_pts = crate::covariance::project_locations(projection, locs)?;
                vec![BlockLayout {
                    shore: None,
                    indices: (0..locs.len()).collect(),
                    cache: PairwiseCache::new_on_circle(&circle_pts)?,
                    kind: CorrKind::Circle,
                    circle: model.circle,
                    suffix: String::new(),
                }]
            }
            DomainKind::ByShore => {
                let mut blocks = Vec::new();
                for (shore, suffix) in [(Shore::North, "_N"), (Shore::South, "_S")] {
                    let indices: Vec<usize> = locs
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| l.shore == shore)
                        .map(|(i, _)| i)
                        .collect();
                    if indices.is_empty() {
                        return Err(Error::EmptyShore(shore));
                    }
                    let pts: Vec<SpatialPoint> =
                        indices.iter().map(|&i| SpatialPoint::from(&locs[i])).collect();
                    blocks.push(BlockLayout {
                        shore: Some(shore),
                        indices,
                        cache: PairwiseCache::new(&pts),
                        kind: model.id.corr_kind(),
                        circle: model.circle,
                        suffix: suffix.to_string(),
                    });
                }
                blocks
            }
        };
        Ok(SpatialLayout { blocks })
    }

    /// Initial correlation spec for block `b` with every decay parameter at
    /// its prior mean and the anisotropy at identity.
    pub fn neutral_corr(&self, b: usize, hp: &Hyperpriors) -> CorrelationSpec {
        let block = &self.blocks[b];
        let geo_mean = hp
            .phi
            .get(b)
            .map(|p| p.geo.mean())
            .unwrap_or(1.0);
        match block.kind {
            CorrKind::None => CorrelationSpec::None,
            CorrKind::Independence => CorrelationSpec::Independence,
            CorrKind::Isotropic => CorrelationSpec::Isotropic { phi: geo_mean },
            CorrKind::GeomAniso => CorrelationSpec::GeomAniso {
                phi: geo_mean,
                psi_a: std::f64::consts::FRAC_PI_2,
                psi_r: 1.5,
            },
            CorrKind::CovariateInCorr => CorrelationSpec::CovariateInCorr {
                phi1: geo_mean,
                phi2: hp
                    .phi
                    .get(b)
                    .and_then(|p| p.depth.as_ref())
                    .map(|d| d.mean())
                    .unwrap_or(1.0),
            },
            CorrKind::Circle => match block.circle {
                CircleKernel::Chord => CorrelationSpec::CircleChord { phi: geo_mean },
                CircleKernel::Arc => CorrelationSpec::CircleArc { phi: geo_mean },
            },
        }
    }
}

/// Derive the fit hyperpriors from the data: variance priors centred on the
/// preliminary log-linear fit's residual variance, and decay priors whose
/// rate is solved so the implied range stays below half the maximum
/// observed distance with 99% probability.
pub fn derive_hyperpriors(model: &ModelConfig, data: &Dataset) -> Result<Hyperpriors> {
    let layout = SpatialLayout::new(model, &data.locations)?;
    derive_hyperpriors_with_layout(&layout, data)
}

pub fn derive_hyperpriors_with_layout(
    layout: &SpatialLayout,
    data: &Dataset,
) -> Result<Hyperpriors> {
    let s2 = preliminary_residual_variance(data)?;
    let mut phi = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let d_max = block.max_effective_distance().max(1e-9);
        let geo = Hyperpriors::range_rule_prior(DEFAULT_PHI_SHAPE, d_max);
        let depth = if block.kind == CorrKind::CovariateInCorr {
            let dq_max = block.cache.max_depth_distance().unwrap_or(0.0).max(1e-9);
            Some(Hyperpriors::range_rule_prior(DEFAULT_PHI_SHAPE, dq_max))
        } else {
            None
        };
        phi.push(BlockPhiPrior { geo, depth });
    }
    Ok(Hyperpriors {
        beta_var: DEFAULT_BETA_VAR,
        sigma2: InvGammaPrior {
            shape: DEFAULT_VAR_SHAPE,
            scale: s2,
        },
        tau2: InvGammaPrior {
            shape: DEFAULT_VAR_SHAPE,
            scale: s2,
        },
        phi: phi.clone(),
        phi_gamma: None,
        prelim_residual_var: s2,
    })
}

/// True parameter values for synthetic data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// One entry per spatial block of the generating model (none for M0).
    pub blocks: Vec<BlockTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTruth {
    pub sigma2: f64,
    pub corr: CorrelationSpec,
}

impl TruthParams {
    /// Defaults with covariate effects spanning roughly eleven-fold (first
    /// covariate, negative) and four-fold (second, positive) rate changes
    /// over a standardized covariate range of about four standard
    /// deviations; remaining covariates are null.
    pub fn default_for(_model: &ModelConfig, layout: &SpatialLayout) -> Self {
        let beta = vec![-(11f64.ln()) / 4.0, 4f64.ln() / 4.0, 0.0, 0.0];
        let blocks = layout
            .blocks
            .iter()
            .map(|b| {
                let d_max = b.max_effective_distance().max(1e-9);
                let phi = d_max / 8.0;
                let corr = match b.kind {
                    CorrKind::None => CorrelationSpec::None,
                    CorrKind::Independence => CorrelationSpec::Independence,
                    CorrKind::Isotropic => CorrelationSpec::Isotropic { phi },
                    CorrKind::GeomAniso => CorrelationSpec::GeomAniso {
                        phi,
                        psi_a: 2.2,
                        psi_r: 2.5,
                    },
                    CorrKind::CovariateInCorr => CorrelationSpec::CovariateInCorr {
                        phi1: phi,
                        phi2: b.cache.max_depth_distance().unwrap_or(1.0).max(1e-9) / 2.0,
                    },
                    CorrKind::Circle => match b.circle {
                        CircleKernel::Chord => CorrelationSpec::CircleChord { phi },
                        CircleKernel::Arc => CorrelationSpec::CircleArc { phi },
                    },
                };
                BlockTruth { sigma2: 0.5, corr }
            })
            .collect();
        TruthParams {
            beta0: 1.2,
            beta,
            tau2: 0.05,
            blocks,
        }
    }
}

/// Flat key-value run configuration, read from a TOML document. Unknown
/// keys are rejected so typos surface instead of silently using defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub chain: ChainSection,
    pub priors: PriorSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub standardize: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            model: None,
            seed: None,
            data: None,
            out: None,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub adapt_target: f64,
    pub adapt_window: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            iterations: 70_000,
            burn_in: 10_000,
            thin: 60,
            chains: 2,
            adapt_target: 0.44,
            adapt_window: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub beta_variance: f64,
    pub var_shape: f64,
    /// Explicit scale for the sigma^2 prior; derived from the preliminary
    /// fit when absent.
    pub sigma2_scale: Option<f64>,
    pub tau2_scale: Option<f64>,
    pub phi_shape: f64,
    pub circle: CircleKernel,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            beta_variance: DEFAULT_BETA_VAR,
            var_shape: DEFAULT_VAR_SHAPE,
            sigma2_scale: None,
            tau2_scale: None,
            phi_shape: DEFAULT_PHI_SHAPE,
            circle: CircleKernel::Chord,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub locations: usize,
    pub days: usize,
    pub span_days: usize,
    /// Share of each covariate's variance coming from a smooth spatial
    /// field (drives spatial confounding in the simulation studies).
    pub covariate_smoothness: Vec<f64>,
    pub truth: Option<TruthSection>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            locations: 160,
            days: 38,
            span_days: 70,
            covariate_smoothness: vec![0.9, 0.7, 0.2, 0.2],
            truth: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSection {
    pub beta0: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub tau2: Option<f64>,
    pub blocks: Vec<TruthBlockSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthBlockSection {
    pub sigma2: Option<f64>,
    pub phi: Option<f64>,
    pub psi_a: Option<f64>,
    pub psi_r: Option<f64>,
    pub phi2: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Truth parameters for simulation: section values layered over the
    /// model defaults.
    pub fn truth_for(&self, model: &ModelConfig, layout: &SpatialLayout) -> Result<TruthParams> {
        let mut truth = TruthParams::default_for(model, layout);
        if let Some(section) = &self.simulate.truth {
            if let Some(b0) = section.beta0 {
                truth.beta0 = b0;
            }
            if let Some(beta) = &section.beta {
                truth.beta = beta.clone();
            }
            if let Some(t2) = section.tau2 {
                truth.tau2 = t2;
            }
            for (b, sec) in section.blocks.iter().enumerate() {
                let slot = truth.blocks.get_mut(b).ok_or_else(|| {
                    Error::Config(format!(
                        "truth block {b} has no matching spatial block in the model"
                    ))
                })?;
                if let Some(s2) = sec.sigma2 {
                    slot.sigma2 = s2;
                }
                apply_block_overrides(&mut slot.corr, sec)?;
            }
        }
        Ok(truth)
    }
}

fn apply_block_overrides(corr: &mut CorrelationSpec, sec: &TruthBlockSection) -> Result<()> {
    match corr {
        CorrelationSpec::None | CorrelationSpec::Independence => {}
        CorrelationSpec::Isotropic { phi }
        | CorrelationSpec::CircleChord { phi }
        | CorrelationSpec::CircleArc { phi } => {
            if let Some(p) = sec.phi {
                *phi = p;
            }
        }
        CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
            if let Some(p) = sec.phi {
                *phi = p;
            }
            if let Some(a) = sec.psi_a {
                *psi_a = a;
            }
            if let Some(r) = sec.psi_r {
                *psi_r = r;
            }
        }
        CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
            if let Some(p) = sec.phi {
                *phi1 = p;
            }
            if let Some(p2) = sec.phi2 {
                *phi2 = p2;
            }
        }
    }
    corr.validate()
}
