//! Coordinate handling: distances, the geometric-anisotropy transform,
//! orthogonal least-squares ellipse fitting, and projections of sampling
//! locations onto the unit circle.
//!
//! All operations here are pure functions of their inputs and safe to call
//! from any number of threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A plain 2-d coordinate pair (easting, northing).
pub type Point = (f64, f64);

/// Which shore of the lake a location belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shore {
    North,
    South,
}

impl std::fmt::Display for Shore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shore::North => write!(f, "north"),
            Shore::South => write!(f, "south"),
        }
    }
}

impl std::str::FromStr for Shore {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "north" | "n" => Ok(Shore::North),
            "south" | "s" => Ok(Shore::South),
            other => Err(format!("unknown shore {other:?}")),
        }
    }
}

/// A sampled site: coordinates, shore label, geodetic depth covariate and
/// the sampling-day bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: u32,
    pub easting: f64,
    pub northing: f64,
    pub shore: Shore,
    /// Geodetic depth q(s): water depth referenced to a fixed low-water
    /// datum, constant along an isobath.
    pub geodetic_depth: f64,
    /// Ordinal sampling-day index t(s), 1-based.
    pub day_index: usize,
    /// Julian day J(t) of the sampling day.
    pub julian_day: u32,
}

impl Location {
    pub fn coords(&self) -> Point {
        (self.easting, self.northing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.day_index < 1 {
            return Err(Error::Config(format!(
                "location {}: day_index must be >= 1",
                self.id
            )));
        }
        if !self.easting.is_finite() || !self.northing.is_finite() {
            return Err(Error::Config(format!(
                "location {}: coordinates must be finite",
                self.id
            )));
        }
        if !self.geodetic_depth.is_finite() {
            return Err(Error::Config(format!(
                "location {}: geodetic depth must be finite",
                self.id
            )));
        }
        Ok(())
    }
}

/// Fitted ellipse: centre, semi-axes with `semi_major >= semi_minor`, and
/// rotation of the major axis in `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: Point,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub rotation: f64,
}

impl EllipseParams {
    /// Point on the ellipse at parametric angle `t`.
    pub fn point_at(&self, t: f64) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let x = self.semi_major * t.cos();
        let y = self.semi_minor * t.sin();
        (
            self.center.0 + c * x - s * y,
            self.center.1 + s * x + c * y,
        )
    }

    /// Normalize so that `semi_major >= semi_minor` and rotation lies in `[0, pi)`.
    fn normalized(mut self) -> Self {
        if self.semi_major < self.semi_minor {
            std::mem::swap(&mut self.semi_major, &mut self.semi_minor);
            self.rotation += std::f64::consts::FRAC_PI_2;
        }
        self.rotation = self.rotation.rem_euclid(std::f64::consts::PI);
        self
    }
}

/// Geometric-anisotropy transform f(s) = s A with
/// A = R(psi_a) * diag(1, 1/psi_r), applied to row vectors.
///
/// `psi_a` is the anisotropy angle, `psi_r >= 1` the anisotropy ratio;
/// det A = 1/psi_r > 0 so the transform is always invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisoTransform {
    pub psi_a: f64,
    pub psi_r: f64,
}

impl AnisoTransform {
    pub fn new(psi_a: f64, psi_r: f64) -> Result<Self> {
        if !(psi_r >= 1.0) || !psi_r.is_finite() || !psi_a.is_finite() {
            return Err(Error::Config(format!(
                "anisotropy ratio must be finite and >= 1, got psi_a={psi_a}, psi_r={psi_r}"
            )));
        }
        Ok(Self { psi_a, psi_r })
    }

    /// Row-vector product s A, i.e. a rotation by `psi_a` composed with a
    /// shrink of the second axis by `1/psi_r`.
    pub fn apply(&self, s: Point) -> Point {
        let (sin, cos) = self.psi_a.sin_cos();
        // A = [[cos, -sin/psi_r], [sin, cos/psi_r]], product taken as s * A.
        (
            s.0 * cos + s.1 * sin,
            (-s.0 * sin + s.1 * cos) / self.psi_r,
        )
    }
}

/// Euclidean distance ||a - b||.
pub fn euclidean_distance(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Distance between the anisotropy-transformed images of `a` and `b`.
pub fn aniso_distance(t: &AnisoTransform, a: Point, b: Point) -> f64 {
    euclidean_distance(t.apply(a), t.apply(b))
}

/// Angular (great-circle) distance between two points on the unit circle,
/// in `[0, pi]`. Errors with `NotOnCircle` if either norm is off by more
/// than 1e-9.
pub fn angular_distance(c1: Point, c2: Point) -> Result<f64> {
    for p in [c1, c2] {
        let dev = (p.0.hypot(p.1) - 1.0).abs();
        if dev >= 1e-9 {
            return Err(Error::NotOnCircle(dev));
        }
    }
    // atan2 form is accurate near both 0 and pi, unlike acos of the dot product.
    let diff = (c1.0 - c2.0).hypot(c1.1 - c2.1);
    let sum = (c1.0 + c2.0).hypot(c1.1 + c2.1);
    Ok(2.0 * diff.atan2(sum))
}

/// Chord distance xi = 2 r sin(omega / 2) subtended by angle `omega` on a
/// circle of radius `r`.
pub fn chord_distance(omega: f64, r: f64) -> f64 {
    2.0 * r * (omega / 2.0).sin()
}

/// Smallest positive angle in `[0, pi/2]` between the segment `ab` and the
/// horizontal axis.
pub fn equator_angle(a: Point, b: Point) -> Result<f64> {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(dy.abs().atan2(dx.abs()))
}

/// Project points onto the unit circle through the fitted ellipse: centre,
/// de-rotate into the ellipse frame, scale each axis to unit length, then
/// push radially onto the circle.
pub fn project_m5(locs: &[Location], e: &EllipseParams) -> Result<Vec<Point>> {
    locs.iter()
        .map(|l| project_point_m5(l.coords(), e))
        .collect()
}

/// M5 projection of a single coordinate pair.
pub fn project_point_m5(p: Point, e: &EllipseParams) -> Result<Point> {
    let (x, y) = (p.0 - e.center.0, p.1 - e.center.1);
    let (sin, cos) = e.rotation.sin_cos();
    // De-rotate first so the axis shrink happens in the ellipse frame.
    let u = (cos * x + sin * y) / e.semi_major;
    let v = (-sin * x + cos * y) / e.semi_minor;
    unit_point((u, v))
}

/// Project centred coordinates radially onto the unit circle.
pub fn project_m6(locs: &[Location]) -> Result<Vec<Point>> {
    if locs.is_empty() {
        return Err(Error::DegenerateConfiguration(
            "no locations to project".into(),
        ));
    }
    let n = locs.len() as f64;
    let cx = locs.iter().map(|l| l.easting).sum::<f64>() / n;
    let cy = locs.iter().map(|l| l.northing).sum::<f64>() / n;
    locs.iter()
        .map(|l| unit_point((l.easting - cx, l.northing - cy)))
        .collect()
}

fn unit_point(p: Point) -> Result<Point> {
    let norm = p.0.hypot(p.1);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((p.0 / norm, p.1 / norm))
}

/// Fit an ellipse to `points` by orthogonal least squares: an algebraic
/// conic fit with the ellipse constraint provides the start, then
/// Gauss-Newton on the geometric (orthogonal) distances refines it.
///
/// Needs at least 5 points in general position; errors with
/// `DegenerateConfiguration` for collinear inputs or when the conic fit is
/// not an ellipse.
pub fn fit_ellipse_ols(points: &[Point]) -> Result<EllipseParams> {
    const MAX_ITER: usize = 100;
    const STEP_TOL: f64 = 1e-10;

    if points.len() < 5 {
        return Err(Error::DegenerateConfiguration(format!(
            "ellipse fit needs at least 5 points, got {}",
            points.len()
        )));
    }
    let init = fit_ellipse_algebraic(points)?;

    // Gauss-Newton on signed orthogonal distances, numerical Jacobian.
    let mut p = [
        init.center.0,
        init.center.1,
        init.semi_major,
        init.semi_minor,
        init.rotation,
    ];
    let n = points.len();
    let mut residuals = vec![0.0; n];
    let mut jac = vec![[0.0; 5]; n];
    for _ in 0..MAX_ITER {
        for (i, &pt) in points.iter().enumerate() {
            residuals[i] = signed_ellipse_distance(&p, pt);
        }
        for col in 0..5 {
            let h = 1e-7 * p[col].abs().max(1e-3);
            let mut lo = p;
            let mut hi = p;
            lo[col] -= h;
            hi[col] += h;
            for (i, &pt) in points.iter().enumerate() {
                jac[i][col] =
                    (signed_ellipse_distance(&hi, pt) - signed_ellipse_distance(&lo, pt))
                        / (2.0 * h);
            }
        }
        // Normal equations J'J delta = -J'r, 5x5.
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for i in 0..n {
            for a in 0..5 {
                jtr[a] -= jac[i][a] * residuals[i];
                for b in 0..5 {
                    jtj[(a, b)] += jac[i][a] * jac[i][b];
                }
            }
        }
        let delta = match jtj.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => {
                // Damp and retry once; near-degenerate Jacobians happen when
                // the fit is already at machine precision.
                let scale = jtj.trace() / 5.0;
                for a in 0..5 {
                    jtj[(a, a)] += 1e-10 * scale.max(1e-300);
                }
                match jtj.cholesky() {
                    Some(ch) => ch.solve(&jtr),
                    None => break,
                }
            }
        };
        let pscale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = 0.0f64;
        for a in 0..5 {
            p[a] += delta[a];
            step = step.max(delta[a].abs());
        }
        p[2] = p[2].abs();
        p[3] = p[3].abs();
        if step < STEP_TOL * (1.0 + pscale) {
            break;
        }
    }
    if !(p[2] > 0.0 && p[3] > 0.0) || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateConfiguration(
            "geometric refinement collapsed".into(),
        ));
    }
    Ok(EllipseParams {
        center: (p[0], p[1]),
        semi_major: p[2],
        semi_minor: p[3],
        rotation: p[4],
    }
    .normalized())
}

/// Signed orthogonal distance from `pt` to the ellipse described by
/// `[cx, cy, a, b, theta]`; negative inside, positive outside.
fn signed_ellipse_distance(p: &[f64; 5], pt: Point) -> f64 {
    let (sin, cos) = p[4].sin_cos();
    let x = pt.0 - p[0];
    let y = pt.1 - p[1];
    let u = cos * x + sin * y;
    let v = -sin * x + cos * y;
    let a = p[2].abs().max(1e-300);
    let b = p[3].abs().max(1e-300);
    let (e0, e1, y0, y1) = if a >= b {
        (a, b, u.abs(), v.abs())
    } else {
        (b, a, v.abs(), u.abs())
    };
    let d = point_ellipse_distance(e0, e1, y0, y1);
    let q = (u / a).powi(2) + (v / b).powi(2);
    if q < 1.0 {
        -d
    } else {
        d
    }
}

/// Distance from a first-quadrant point `(y0, y1)` to the axis-aligned
/// ellipse with semi-axes `e0 >= e1 > 0` (robust bisection on the standard
/// orthogonal-projection root function).
fn point_ellipse_distance(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            // Root of F(t) = (e0 y0 / (t + e0^2))^2 + (e1 y1 / (t + e1^2))^2 - 1
            // on (-e1^2, inf); F is strictly decreasing.
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1) * (e0 / e1);
            let mut s0 = z1 - 1.0;
            let mut s1 = if g < 0.0 {
                0.0
            } else {
                (r0 * z0).hypot(z1) - 1.0
            };
            let mut s = 0.0;
            for _ in 0..200 {
                s = 0.5 * (s0 + s1);
                if s == s0 || s == s1 {
                    break;
                }
                let ratio0 = r0 * z0 / (s + r0);
                let ratio1 = z1 / (s + 1.0);
                let f = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
                if f > 0.0 {
                    s0 = s;
                } else if f < 0.0 {
                    s1 = s;
                } else {
                    break;
                }
            }
            let t = s * e1 * e1;
            let x0 = e0 * e0 * y0 / (t + e0 * e0);
            let x1 = e1 * e1 * y1 / (t + e1 * e1);
            (x0 - y0).hypot(x1 - y1)
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if denom0 > 0.0 && numer0 < denom0 {
            let x0 = e0 * (numer0 / denom0);
            let x1 = e1 * (1.0 - (x0 / e0).powi(2)).max(0.0).sqrt();
            (x0 - y0).hypot(x1)
        } else {
            (y0 - e0).abs()
        }
    }
}

/// Direct algebraic conic fit constrained to ellipses (partitioned
/// scatter-matrix eigenproblem), used to initialize the geometric fit.
fn fit_ellipse_algebraic(points: &[Point]) -> Result<EllipseParams> {
    use nalgebra::{Matrix3, Vector3};

    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut scale = (points
        .iter()
        .map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if scale == 0.0 {
        return Err(Error::DegenerateConfiguration(
            "all points coincide".into(),
        ));
    }
    scale = scale.max(1e-12);
    let norm: Vec<Point> = points
        .iter()
        .map(|p| ((p.0 - cx) / scale, (p.1 - cy) / scale))
        .collect();

    // Collinearity: smallest eigenvalue of the 2x2 covariance vanishes.
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &norm {
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lmin = tr / 2.0 - disc;
    if lmin < 1e-12 * tr.max(1e-300) {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }

    // Scatter blocks over the quadratic (x^2, xy, y^2) and linear (x, y, 1) parts.
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(x, y) in &norm {
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular linear scatter".into()))?;
    let t = -s3_inv * s2.transpose();
    let m_full = s1 + s2 * t;
    // Apply C^{-1} for the ellipse constraint 4ac - b^2 = 1.
    let m = Matrix3::new(
        m_full[(2, 0)] / 2.0,
        m_full[(2, 1)] / 2.0,
        m_full[(2, 2)] / 2.0,
        -m_full[(1, 0)],
        -m_full[(1, 1)],
        -m_full[(1, 2)],
        m_full[(0, 0)] / 2.0,
        m_full[(0, 1)] / 2.0,
        m_full[(0, 2)] / 2.0,
    );

    let quad = real_eigenvectors_3x3(&m)
        .into_iter()
        .find(|v| 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0)
        .ok_or_else(|| {
            Error::DegenerateConfiguration("conic fit is not an ellipse".into())
        })?;
    let lin = t * quad;
    let conic = [quad[0], quad[1], quad[2], lin[0], lin[1], lin[2]];
    let e = conic_to_ellipse(&conic)?;
    Ok(EllipseParams {
        center: (cx + scale * e.center.0, cy + scale * e.center.1),
        semi_major: scale * e.semi_major,
        semi_minor: scale * e.semi_minor,
        rotation: e.rotation,
    }
    .normalized())
}

/// Real eigenvectors of a general (non-symmetric) 3x3 matrix via the
/// characteristic cubic; complex pairs are skipped.
fn real_eigenvectors_3x3(m: &nalgebra::Matrix3<f64>) -> Vec<nalgebra::Vector3<f64>> {
    use nalgebra::Vector3;

    // det(M - l I) = -l^3 + c2 l^2 + c1 l + c0
    let c2 = m.trace();
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
        + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let c1 = -minors;
    let c0 = m.determinant();

    let roots = real_cubic_roots(-1.0, c2, c1, c0);
    let mut out = Vec::new();
    for lambda in roots {
        let a = m - nalgebra::Matrix3::identity() * lambda;
        // Null vector: largest cross product among row pairs.
        let r0 = Vector3::new(a[(0, 0)], a[(0, 1)], a[(0, 2)]);
        let r1 = Vector3::new(a[(1, 0)], a[(1, 1)], a[(1, 2)]);
        let r2 = Vector3::new(a[(2, 0)], a[(2, 1)], a[(2, 2)]);
        let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
        let best = candidates
            .iter()
            .max_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap())
            .copied()
            .unwrap();
        if best.norm() > 0.0 {
            out.push(best / best.norm());
        }
    }
    out
}

/// Real roots of a x^3 + b x^2 + c x + d (a != 0), trigonometric method.
fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let b = b / a;
    let c = c / a;
    let d = d / a;
    // Depressed cubic t^3 + p t + q with x = t - b/3.
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if disc > 0.0 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        vec![u + v + shift]
    } else if p.abs() < 1e-300 {
        vec![shift]
    } else {
        let rho = (-p * p * p / 27.0).sqrt();
        let theta = ((-q / 2.0) / rho).clamp(-1.0, 1.0).acos();
        let mag = 2.0 * (-p / 3.0).sqrt();
        (0..3)
            .map(|k| mag * ((theta + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift)
            .collect()
    }
}

/// Geometric parameters of the conic a x^2 + b xy + c y^2 + d x + e y + f = 0,
/// which must be an ellipse.
fn conic_to_ellipse(coef: &[f64; 6]) -> Result<EllipseParams> {
    let [mut a, mut b, mut c, mut d, mut e, mut f] = *coef;
    // Normalize the overall sign so both quadratic-form eigenvalues are positive.
    if a + c < 0.0 {
        a = -a;
        b = -b;
        c = -c;
        d = -d;
        e = -e;
        f = -f;
    }
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        return Err(Error::DegenerateConfiguration(
            "conic fit is not an ellipse".into(),
        ));
    }
    let x0 = (2.0 * c * d - b * e) / disc;
    let y0 = (2.0 * a * e - b * d) / disc;
    let f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f;
    // Eigenvalues of [[a, b/2], [b/2, c]] give the axis scale factors.
    let tr = a + c;
    let det = a * c - b * b / 4.0;
    let s = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 - s;
    let l2 = tr / 2.0 + s;
    if l1 * f0 >= 0.0 || l2 * f0 >= 0.0 {
        return Err(Error::DegenerateConfiguration(
            "degenerate (point or imaginary) ellipse".into(),
        ));
    }
    // -f0/l is positive for both eigenvalues; the smaller one gives the major axis.
    let major = (-f0 / l1).sqrt();
    let minor = (-f0 / l2).sqrt();
    // 0.5 atan2(b, a-c) is the direction of the larger eigenvalue, i.e. the
    // minor axis; the major axis sits a quarter turn away.
    let rotation = 0.5 * b.atan2(a - c) + std::f64::consts::FRAC_PI_2;
    Ok(EllipseParams {
        center: (x0, y0),
        semi_major: major,
        semi_minor: minor,
        rotation,
    }
    .normalized())
}
