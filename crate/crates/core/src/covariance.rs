//! Correlation functions and covariance matrices for the spatial models
//! M0-M10: isotropic exponential decay, geometric anisotropy, a geodetic
//! depth covariate inside the correlation, and exponential kernels on the
//! unit circle (chord or arc distance), over a whole-region, circular, or
//! per-shore domain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    self, angular_distance, euclidean_distance, fit_ellipse_ols, AnisoTransform, Location, Point,
    Shore,
};

/// Relative jitter ladder tried by [`cholesky_jittered`], scaled by the mean
/// diagonal entry.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// A point as seen by a correlation function: plane coordinates plus the
/// optional geodetic depth covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialPoint {
    pub x: f64,
    pub y: f64,
    pub depth: Option<f64>,
}

impl SpatialPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, depth: None }
    }

    pub fn with_depth(x: f64, y: f64, depth: f64) -> Self {
        Self {
            x,
            y,
            depth: Some(depth),
        }
    }

    pub fn coords(&self) -> Point {
        (self.x, self.y)
    }
}

impl From<&Location> for SpatialPoint {
    fn from(l: &Location) -> Self {
        SpatialPoint::with_depth(l.easting, l.northing, l.geodetic_depth)
    }
}

/// Spatial correlation structure with its decay parameters.
///
/// All decay parameters are strictly positive; `psi_r >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorrelationSpec {
    /// No spatial effect at all (the baseline M0).
    None,
    /// Spatially uncorrelated effects: rho = 1 at zero distance, else 0.
    Independence,
    /// Exponential decay in Euclidean distance, exp(-d / phi).
    Isotropic { phi: f64 },
    /// Exponential decay in the anisotropy-transformed distance
    /// ||f(s) - f(s')|| with f(s) = s A.
    GeomAniso { phi: f64, psi_a: f64, psi_r: f64 },
    /// Nonstationary kernel exp(-d/phi1 - |q(s) - q(s')|/phi2) adding a
    /// geodetic-depth difference to the geographic distance.
    CovariateInCorr { phi1: f64, phi2: f64 },
    /// Exponential decay in chord distance on the unit circle,
    /// exp(-2 sin(omega/2) / phi).
    CircleChord { phi: f64 },
    /// Exponential decay in arc (angular) distance, exp(-omega / phi),
    /// valid on omega in [0, pi].
    CircleArc { phi: f64 },
}

impl CorrelationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CorrelationSpec::None | CorrelationSpec::Independence => true,
            CorrelationSpec::Isotropic { phi }
            | CorrelationSpec::CircleChord { phi }
            | CorrelationSpec::CircleArc { phi } => phi > 0.0,
            CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
                phi > 0.0 && psi_r >= 1.0 && psi_a.is_finite()
            }
            CorrelationSpec::CovariateInCorr { phi1, phi2 } => phi1 > 0.0 && phi2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid correlation spec {self:?}")))
        }
    }

    /// Whether the structure operates on circle-projected points.
    pub fn on_circle(&self) -> bool {
        matches!(
            self,
            CorrelationSpec::CircleChord { .. } | CorrelationSpec::CircleArc { .. }
        )
    }
}

/// Which projection carries locations onto the unit circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// Fit an ellipse to the coordinates, shrink its axes to unit length,
    /// then push each point radially onto the circle (model M5).
    EllipseFit,
    /// Centre the coordinates and push each point radially onto the circle
    /// (model M6).
    Centroid,
}

/// One shore's Gaussian-process settings in a by-shore domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShoreProcess {
    pub corr: CorrelationSpec,
    pub sigma2: f64,
}

/// Spatial domain plus the correlation structure and process variance of
/// each Gaussian process block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DomainSpec {
    /// A single Gaussian process over the whole region.
    WholeLake { corr: CorrelationSpec, sigma2: f64 },
    /// A single Gaussian process over the unit circle.
    Circle {
        projection: Projection,
        corr: CorrelationSpec,
        sigma2: f64,
    },
    /// Independent Gaussian processes for the north and south shores.
    ByShore {
        north: ShoreProcess,
        south: ShoreProcess,
    },
}

/// A dense covariance matrix, kept symmetric, with any jitter applied
/// during factorization recorded.
///
/// For by-shore domains the rows are ordered north block first, then south;
/// `order[k]` is the input index of row `k`.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub dim: usize,
    pub values: DMatrix<f64>,
    pub jitter_used: f64,
    pub order: Vec<usize>,
}

impl CovarianceMatrix {
    /// Undo the shore ordering: entry (i, j) in input indexing.
    pub fn in_input_order(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for a in 0..self.dim {
            for b in 0..self.dim {
                out[(self.order[a], self.order[b])] = self.values[(a, b)];
            }
        }
        out
    }
}

/// Correlation between two points under `spec`; 1 exactly when the
/// effective distance is zero.
pub fn correlate(spec: &CorrelationSpec, a: &SpatialPoint, b: &SpatialPoint) -> Result<f64> {
    match *spec {
        CorrelationSpec::None | CorrelationSpec::Independence => {
            Ok(if a.coords() == b.coords() { 1.0 } else { 0.0 })
        }
        CorrelationSpec::Isotropic { phi } => {
            Ok((-euclidean_distance(a.coords(), b.coords()) / phi).exp())
        }
        CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
            let t = AnisoTransform::new(psi_a, psi_r)?;
            Ok((-geometry::aniso_distance(&t, a.coords(), b.coords()) / phi).exp())
        }
        CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
            let (qa, qb) = match (a.depth, b.depth) {
                (Some(qa), Some(qb)) => (qa, qb),
                _ => return Err(Error::MissingCovariate),
            };
            let d = euclidean_distance(a.coords(), b.coords());
            Ok((-d / phi1 - (qa - qb).abs() / phi2).exp())
        }
        CorrelationSpec::CircleChord { phi } => {
            let omega = angular_distance(a.coords(), b.coords())?;
            Ok((-geometry::chord_distance(omega, 1.0) / phi).exp())
        }
        CorrelationSpec::CircleArc { phi } => {
            let omega = angular_distance(a.coords(), b.coords())?;
            Ok((-omega / phi).exp())
        }
    }
}

/// Unit-diagonal correlation matrix over `points` under `spec`.
pub fn correlation_matrix(spec: &CorrelationSpec, points: &[SpatialPoint]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = points.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = correlate(spec, &points[i], &points[j])?;
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(m)
}

/// Build the full covariance matrix of the latent spatial effects for a
/// domain specification.
///
/// By-shore domains produce a block-diagonal matrix with rows ordered north
/// first; the permutation back to input order is recorded in `order`.
pub fn build_covariance(domain: &DomainSpec, locs: &[Location]) -> Result<CovarianceMatrix> {
    let n = locs.len();
    if n == 0 {
        return Err(Error::Config("empty location set".into()));
    }
    match domain {
        DomainSpec::WholeLake { corr, sigma2 } => {
            check_variance(*sigma2)?;
            let pts: Vec<SpatialPoint> = locs.iter().map(SpatialPoint::from).collect();
            let mut m = correlation_matrix(corr, &pts)?;
            m.scale_mut(*sigma2);
            Ok(CovarianceMatrix {
                dim: n,
                values: m,
                jitter_used: 0.0,
                order: (0..n).collect(),
            })
        }
        DomainSpec::Circle {
            projection,
            corr,
            sigma2,
        } => {
            check_variance(*sigma2)?;
            let circle = project_locations(*projection, locs)?;
            let pts: Vec<SpatialPoint> = circle
                .iter()
                .map(|&(x, y)| SpatialPoint::new(x, y))
                .collect();
            let mut m = correlation_matrix(corr, &pts)?;
            m.scale_mut(*sigma2);
            Ok(CovarianceMatrix {
                dim: n,
                values: m,
                jitter_used: 0.0,
                order: (0..n).collect(),
            })
        }
        DomainSpec::ByShore { north, south } => {
            check_variance(north.sigma2)?;
            check_variance(south.sigma2)?;
            let mut order: Vec<usize> = Vec::with_capacity(n);
            for shore in [Shore::North, Shore::South] {
                let start = order.len();
                order.extend(
                    locs.iter()
                        .enumerate()
                        .filter(|(_, l)| l.shore == shore)
                        .map(|(i, _)| i),
                );
                if order.len() == start {
                    return Err(Error::EmptyShore(shore));
                }
            }
            let n_north = locs.iter().filter(|l| l.shore == Shore::North).count();
            let mut m = DMatrix::zeros(n, n);
            for (block, proc_) in [
                (0..n_north, north),
                (n_north..n, south),
            ] {
                let pts: Vec<SpatialPoint> = block
                    .clone()
                    .map(|k| SpatialPoint::from(&locs[order[k]]))
                    .collect();
                let mut sub = correlation_matrix(&proc_.corr, &pts)?;
                sub.scale_mut(proc_.sigma2);
                let off = block.start;
                for a in 0..sub.nrows() {
                    for b in 0..sub.ncols() {
                        m[(off + a, off + b)] = sub[(a, b)];
                    }
                }
            }
            Ok(CovarianceMatrix {
                dim: n,
                values: m,
                jitter_used: 0.0,
                order,
            })
        }
    }
}

fn check_variance(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "process variance must be positive and finite, got {sigma2}"
        )))
    }
}

/// Project locations onto the unit circle for a circular domain.
pub fn project_locations(projection: Projection, locs: &[Location]) -> Result<Vec<Point>> {
    match projection {
        Projection::EllipseFit => {
            let coords: Vec<Point> = locs.iter().map(Location::coords).collect();
            let ellipse = fit_ellipse_ols(&coords)?;
            geometry::project_m5(locs, &ellipse)
        }
        Projection::Centroid => geometry::project_m6(locs),
    }
}

/// Lower-triangular Cholesky factor of `m + jitter * I`, escalating the
/// jitter through `JITTER_LADDER` (relative to the mean diagonal) until the
/// factorization succeeds.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = m.nrows();
    let mean_diag = m.diagonal().sum() / n as f64;
    let mut last = 0.0;
    for &rel in JITTER_LADDER.iter() {
        let jitter = rel * mean_diag.abs();
        last = jitter;
        let mut work = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                work[(i, i)] += jitter;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(work) {
            return Ok(JitteredCholesky {
                factor: chol,
                jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite(last))
}

/// A successful (possibly jittered) Cholesky factorization.
pub struct JitteredCholesky {
    pub factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn lower(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// log det of the factored matrix (with jitter included).
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .factor
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// Pairwise quantities that stay fixed while hyperparameters move: geodetic
/// distances, depth differences, and (for circular domains) angular
/// distances. Anisotropy-transformed distances are recomputed per draw.
#[derive(Debug, Clone)]
pub struct PairwiseCache {
    pub n: usize,
    coords: Vec<Point>,
    d_geo: DMatrix<f64>,
    d_depth: Option<DMatrix<f64>>,
    d_omega: Option<DMatrix<f64>>,
}

impl PairwiseCache {
    pub fn new(points: &[SpatialPoint]) -> Self {
        let n = points.len();
        let coords: Vec<Point> = points.iter().map(SpatialPoint::coords).collect();
        let mut d_geo = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclidean_distance(coords[i], coords[j]);
                d_geo[(i, j)] = d;
                d_geo[(j, i)] = d;
            }
        }
        let d_depth = if points.iter().all(|p| p.depth.is_some()) {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = (points[i].depth.unwrap() - points[j].depth.unwrap()).abs();
                    m[(i, j)] = d;
                    m[(j, i)] = d;
                }
            }
            Some(m)
        } else {
            None
        };
        Self {
            n,
            coords,
            d_geo,
            d_depth,
            d_omega: None,
        }
    }

    /// Cache for circle-projected points: also precomputes angular distances.
    pub fn new_on_circle(points: &[Point]) -> Result<Self> {
        let n = points.len();
        let mut d_omega = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let w = angular_distance(points[i], points[j])?;
                d_omega[(i, j)] = w;
                d_omega[(j, i)] = w;
            }
        }
        let sp: Vec<SpatialPoint> = points.iter().map(|&(x, y)| SpatialPoint::new(x, y)).collect();
        let mut cache = Self::new(&sp);
        cache.d_omega = Some(d_omega);
        Ok(cache)
    }

    pub fn max_geo_distance(&self) -> f64 {
        self.d_geo.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_depth_distance(&self) -> Option<f64> {
        self.d_depth
            .as_ref()
            .map(|m| m.iter().cloned().fold(0.0, f64::max))
    }

    pub fn max_omega(&self) -> Option<f64> {
        self.d_omega
            .as_ref()
            .map(|m| m.iter().cloned().fold(0.0, f64::max))
    }

    /// Unit-diagonal correlation matrix for `spec`, using cached distances
    /// where possible.
    pub fn corr_matrix(&self, spec: &CorrelationSpec) -> Result<DMatrix<f64>> {
        let n = self.n;
        let mut m = DMatrix::identity(n, n);
        match *spec {
            CorrelationSpec::None | CorrelationSpec::Independence => {}
            CorrelationSpec::Isotropic { phi } => {
                self.fill_symmetric(&mut m, |i, j| (-self.d_geo[(i, j)] / phi).exp());
            }
            CorrelationSpec::GeomAniso { phi, psi_a, psi_r } => {
                let t = AnisoTransform::new(psi_a, psi_r)?;
                let imgs: Vec<Point> = self.coords.iter().map(|&p| t.apply(p)).collect();
                self.fill_symmetric(&mut m, |i, j| {
                    (-euclidean_distance(imgs[i], imgs[j]) / phi).exp()
                });
            }
            CorrelationSpec::CovariateInCorr { phi1, phi2 } => {
                let dq = self.d_depth.as_ref().ok_or(Error::MissingCovariate)?;
                self.fill_symmetric(&mut m, |i, j| {
                    (-self.d_geo[(i, j)] / phi1 - dq[(i, j)] / phi2).exp()
                });
            }
            CorrelationSpec::CircleChord { phi } => {
                let om = self
                    .d_omega
                    .as_ref()
                    .ok_or(Error::NotOnCircle(f64::NAN))?;
                self.fill_symmetric(&mut m, |i, j| {
                    (-geometry::chord_distance(om[(i, j)], 1.0) / phi).exp()
                });
            }
            CorrelationSpec::CircleArc { phi } => {
                let om = self
                    .d_omega
                    .as_ref()
                    .ok_or(Error::NotOnCircle(f64::NAN))?;
                self.fill_symmetric(&mut m, |i, j| (-om[(i, j)] / phi).exp());
            }
        }
        Ok(m)
    }

    fn fill_symmetric<F: Fn(usize, usize) -> f64>(&self, m: &mut DMatrix<f64>, f: F) {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shore;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn loc(id: u32, x: f64, y: f64, shore: Shore, depth: f64) -> Location {
        Location {
            id,
            easting: x,
            northing: y,
            shore,
            geodetic_depth: depth,
            day_index: 1,
            julian_day: 1,
        }
    }

    #[test]
    fn isotropic_examples() {
        let spec = CorrelationSpec::Isotropic { phi: 2.0 };
        let a = SpatialPoint::new(0.0, 0.0);
        assert_eq!(correlate(&spec, &a, &a).unwrap(), 1.0);
        let b = SpatialPoint::new(2.0, 0.0); // d = phi
        assert_relative_eq!(
            correlate(&spec, &a, &b).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariate_in_corr_depth_term_vanishes() {
        let spec = CorrelationSpec::CovariateInCorr {
            phi1: 3.0,
            phi2: 0.5,
        };
        let a = SpatialPoint::with_depth(0.0, 0.0, 1.25);
        let b = SpatialPoint::with_depth(3.0, 0.0, 1.25);
        assert_relative_eq!(
            correlate(&spec, &a, &b).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        let c = SpatialPoint::new(3.0, 0.0);
        assert!(matches!(
            correlate(&spec, &a, &c),
            Err(Error::MissingCovariate)
        ));
    }

    #[test]
    fn circle_chord_example() {
        let spec = CorrelationSpec::CircleChord { phi: 2.0 };
        let a = SpatialPoint::new(1.0, 0.0);
        let b = SpatialPoint::new(-1.0, 0.0); // omega = pi, chord = 2
        assert_relative_eq!(
            correlate(&spec, &a, &b).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        let off = SpatialPoint::new(0.5, 0.0);
        assert!(matches!(
            correlate(&spec, &a, &off),
            Err(Error::NotOnCircle(_))
        ));
    }

    #[test]
    fn geom_aniso_identity_matches_isotropic() {
        let aniso = CorrelationSpec::GeomAniso {
            phi: 1.5,
            psi_a: 0.0,
            psi_r: 1.0,
        };
        let iso = CorrelationSpec::Isotropic { phi: 1.5 };
        let pts = [
            SpatialPoint::new(0.0, 0.0),
            SpatialPoint::new(1.0, 2.0),
            SpatialPoint::new(-3.0, 0.7),
        ];
        for a in &pts {
            for b in &pts {
                assert_relative_eq!(
                    correlate(&aniso, a, b).unwrap(),
                    correlate(&iso, a, b).unwrap(),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn independence_covariance_is_scaled_identity() {
        let locs: Vec<Location> = (0..4)
            .map(|i| loc(i, i as f64, 0.0, Shore::North, 1.0))
            .collect();
        let cov = build_covariance(
            &DomainSpec::WholeLake {
                corr: CorrelationSpec::Independence,
                sigma2: 3.0,
            },
            &locs,
        )
        .unwrap();
        assert_eq!(cov.values, DMatrix::identity(4, 4) * 3.0);
    }

    #[test]
    fn by_shore_blocks_have_zero_cross_covariance() {
        let mut locs = Vec::new();
        for i in 0..3 {
            locs.push(loc(i, i as f64, 1.0, Shore::North, 1.0));
            locs.push(loc(10 + i, i as f64, -1.0, Shore::South, 1.0));
        }
        let cov = build_covariance(
            &DomainSpec::ByShore {
                north: ShoreProcess {
                    corr: CorrelationSpec::Isotropic { phi: 1.0 },
                    sigma2: 2.0,
                },
                south: ShoreProcess {
                    corr: CorrelationSpec::Isotropic { phi: 0.5 },
                    sigma2: 1.0,
                },
            },
            &locs,
        )
        .unwrap();
        let full = cov.in_input_order();
        for (i, a) in locs.iter().enumerate() {
            for (j, b) in locs.iter().enumerate() {
                if a.shore != b.shore {
                    assert_eq!(full[(i, j)], 0.0);
                }
            }
        }
        // Diagonal carries the per-shore variance.
        for (i, a) in locs.iter().enumerate() {
            let expect = if a.shore == Shore::North { 2.0 } else { 1.0 };
            assert_eq!(full[(i, i)], expect);
        }
    }

    #[test]
    fn by_shore_missing_shore_errors() {
        let locs: Vec<Location> = (0..3)
            .map(|i| loc(i, i as f64, 1.0, Shore::North, 1.0))
            .collect();
        let d = DomainSpec::ByShore {
            north: ShoreProcess {
                corr: CorrelationSpec::Independence,
                sigma2: 1.0,
            },
            south: ShoreProcess {
                corr: CorrelationSpec::Independence,
                sigma2: 1.0,
            },
        };
        assert!(matches!(
            build_covariance(&d, &locs),
            Err(Error::EmptyShore(Shore::South))
        ));
    }

    #[test]
    fn isotropic_off_diagonal_value() {
        let locs = vec![
            loc(0, 0.0, 0.0, Shore::North, 1.0),
            loc(1, 1.5, 0.0, Shore::North, 1.0),
        ];
        let cov = build_covariance(
            &DomainSpec::WholeLake {
                corr: CorrelationSpec::Isotropic { phi: 1.5 },
                sigma2: 2.0,
            },
            &locs,
        )
        .unwrap();
        assert_relative_eq!(cov.values[(0, 1)], 2.0 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_identity_no_jitter() {
        let m = DMatrix::identity(3, 3);
        let ch = cholesky_jittered(&m).unwrap();
        assert_eq!(ch.jitter, 0.0);
        assert_relative_eq!(
            (ch.lower() * ch.lower().transpose() - m).norm(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn cholesky_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let ch = cholesky_jittered(&m).unwrap();
        let l = ch.lower();
        assert_relative_eq!(l[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(l[(1, 1)], 3.0, epsilon = 1e-14);
        assert_eq!(ch.jitter, 0.0);
    }

    #[test]
    fn cholesky_rank_deficient_needs_jitter() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let ch = cholesky_jittered(&m).unwrap();
        assert!(ch.jitter > 0.0);
        let rebuilt = ch.lower() * ch.lower().transpose();
        let target = &m + DMatrix::identity(3, 3) * ch.jitter;
        assert!((rebuilt - target).norm() < 1e-9);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky_jittered(&m),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn correlation_matrices_are_positive_semidefinite() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let specs = [
            CorrelationSpec::Independence,
            CorrelationSpec::Isotropic { phi: 1.0 },
            CorrelationSpec::GeomAniso {
                phi: 1.0,
                psi_a: 0.8,
                psi_r: 3.0,
            },
            CorrelationSpec::CovariateInCorr {
                phi1: 1.0,
                phi2: 0.4,
            },
        ];
        for trial in 0..50 {
            let pts: Vec<SpatialPoint> = (0..20)
                .map(|_| {
                    SpatialPoint::with_depth(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(0.0..2.0),
                    )
                })
                .collect();
            for spec in &specs {
                let m = correlation_matrix(spec, &pts).unwrap();
                let eig = m.symmetric_eigen();
                let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(
                    min >= -1e-10,
                    "trial {trial}: min eigenvalue {min} for {spec:?}"
                );
            }
        }
    }

    #[test]
    fn circle_specs_positive_semidefinite() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let pts: Vec<SpatialPoint> = (0..20)
                .map(|_| {
                    let t: f64 = rng.random_range(0.0..(2.0 * PI));
                    SpatialPoint::new(t.cos(), t.sin())
                })
                .collect();
            for spec in [
                CorrelationSpec::CircleChord { phi: 0.7 },
                CorrelationSpec::CircleArc { phi: 0.7 },
            ] {
                let m = correlation_matrix(&spec, &pts).unwrap();
                let min = m
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                assert!(min >= -1e-10, "min eigenvalue {min} for {spec:?}");
            }
        }
    }

    #[test]
    fn nesting_identities() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        let pts: Vec<SpatialPoint> = (0..15)
            .map(|_| {
                SpatialPoint::with_depth(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..3.0),
                )
            })
            .collect();
        let iso = correlation_matrix(&CorrelationSpec::Isotropic { phi: 1.3 }, &pts).unwrap();

        let aniso = correlation_matrix(
            &CorrelationSpec::GeomAniso {
                phi: 1.3,
                psi_a: 0.0,
                psi_r: 1.0,
            },
            &pts,
        )
        .unwrap();
        assert!((&aniso - &iso).abs().max() < 1e-12);

        let covcorr = correlation_matrix(
            &CorrelationSpec::CovariateInCorr {
                phi1: 1.3,
                phi2: 1e12,
            },
            &pts,
        )
        .unwrap();
        assert!((&covcorr - &iso).abs().max() < 1e-9);

        let near_zero = correlation_matrix(&CorrelationSpec::Isotropic { phi: 1e-12 }, &pts)
            .unwrap();
        assert!((&near_zero - DMatrix::identity(15, 15)).abs().max() < 1e-9);
    }

    #[test]
    fn chord_and_arc_agree_near_zero() {
        // Same phi plays the role of calibration: chord ~ omega as omega -> 0.
        for phi in [0.2, 0.5, 1.0, 2.0, 5.0] {
            for k in 0..=50 {
                let omega = 0.5 * k as f64 / 50.0;
                let chord = (-geometry::chord_distance(omega, 1.0) / phi).exp();
                let arc = (-omega / phi).exp();
                assert!(
                    (chord - arc).abs() < 0.05,
                    "phi={phi} omega={omega}: {chord} vs {arc}"
                );
            }
        }
    }

    #[test]
    fn by_shore_permutation_commutes() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let mut locs = Vec::new();
        for i in 0..6 {
            let shore = if i % 2 == 0 { Shore::North } else { Shore::South };
            locs.push(loc(i as u32, i as f64 * 0.7, (i % 2) as f64, shore, 0.5 * i as f64));
        }
        let domain = DomainSpec::ByShore {
            north: ShoreProcess {
                corr: CorrelationSpec::Isotropic { phi: 2.0 },
                sigma2: 1.5,
            },
            south: ShoreProcess {
                corr: CorrelationSpec::CovariateInCorr {
                    phi1: 1.0,
                    phi2: 0.8,
                },
                sigma2: 0.7,
            },
        };
        let base = build_covariance(&domain, &locs).unwrap().in_input_order();
        let mut shuffled_idx: Vec<usize> = (0..locs.len()).collect();
        shuffled_idx.shuffle(&mut rng);
        let shuffled: Vec<Location> = shuffled_idx.iter().map(|&i| locs[i].clone()).collect();
        let cov = build_covariance(&domain, &shuffled).unwrap().in_input_order();
        for (a, &ia) in shuffled_idx.iter().enumerate() {
            for (b, &ib) in shuffled_idx.iter().enumerate() {
                assert_eq!(cov[(a, b)], base[(ia, ib)]);
            }
        }
    }

    #[test]
    fn covariance_matrix_is_symmetric() {
        let locs: Vec<Location> = (0..8)
            .map(|i| loc(i, (i as f64).sin() * 3.0, (i as f64).cos() * 2.0, Shore::North, 1.0))
            .collect();
        let cov = build_covariance(
            &DomainSpec::WholeLake {
                corr: CorrelationSpec::GeomAniso {
                    phi: 1.0,
                    psi_a: 1.1,
                    psi_r: 2.5,
                },
                sigma2: 1.0,
            },
            &locs,
        )
        .unwrap();
        assert!((&cov.values - cov.values.transpose()).abs().max() < 1e-12);
    }
}
