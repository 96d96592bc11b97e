//! Metropolis-Hastings building blocks: the weighted-least-squares proposal
//! for GLM coefficient blocks, and Robbins-Monro scale adaptation for
//! random-walk steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Robbins-Monro adaptation of a log proposal scale toward a target
/// acceptance rate; the step size decays once per window.
#[derive(Debug, Clone)]
pub(crate) struct Adapt {
    log_scale: f64,
    target: f64,
    window: usize,
}

impl Adapt {
    pub fn new(initial_scale: f64, target: f64, window: usize) -> Self {
        Self {
            log_scale: initial_scale.ln(),
            target,
            window: window.max(1),
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// One Robbins-Monro update; `iter` is the 1-based iteration count.
    /// Callers stop invoking this at the end of burn-in, freezing the scale.
    pub fn update(&mut self, iter: usize, accepted: bool) {
        let k = iter.div_ceil(self.window).max(1);
        let step = 1.0 / k as f64;
        let indicator = if accepted { 1.0 } else { 0.0 };
        self.log_scale += step * (indicator - self.target);
        self.log_scale = self.log_scale.clamp(-20.0, 20.0);
    }
}

/// Reflect an angle proposal into (0, pi) at the {0, pi} boundaries.
pub(crate) fn reflect_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let v = x.rem_euclid(two_pi);
    if v > std::f64::consts::PI {
        two_pi - v
    } else {
        v
    }
}

/// A Poisson GLM coefficient block: counts ~ Poi(exp(design * theta + offset))
/// with independent zero-mean normal priors of precision `prior_prec` on the
/// coefficients.
pub(crate) struct GlmTarget<'a> {
    pub design: &'a DMatrix<f64>,
    pub offset: &'a DVector<f64>,
    pub prior_prec: &'a DVector<f64>,
    pub counts: &'a [u64],
}

struct WlsProposal {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    log_lik: f64,
}

impl GlmTarget<'_> {
    /// Weighted-least-squares (one IRLS step) normal approximation at
    /// `theta`: precision `X' diag(lambda) X + prior precision`, mean the
    /// solved working-response regression. `None` if anything overflows.
    fn wls_at(&self, theta: &DVector<f64>) -> Option<WlsProposal> {
        let eta = self.design * theta + self.offset;
        let p = theta.len();
        let n = eta.len();
        let mut lambda = DVector::zeros(n);
        let mut log_lik = 0.0;
        for i in 0..n {
            let l = eta[i].exp();
            if !l.is_finite() {
                return None;
            }
            lambda[i] = l;
            log_lik += -l + self.counts[i] as f64 * eta[i];
        }
        // Precision A = X' diag(lambda) X + diag(prior_prec).
        let mut weighted = self.design.clone();
        for i in 0..n {
            let w = lambda[i].sqrt();
            weighted.row_mut(i).scale_mut(w);
        }
        let mut precision = weighted.transpose() * &weighted;
        for j in 0..p {
            precision[(j, j)] += self.prior_prec[j];
        }
        // Right-hand side X' [lambda .* (eta - offset) + (y - lambda)];
        // the working response never divides by lambda, so zero rates are fine.
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            resid[i] = lambda[i] * (eta[i] - self.offset[i]) + (self.counts[i] as f64 - lambda[i]);
        }
        let rhs = self.design.transpose() * resid;
        if rhs.iter().any(|v| !v.is_finite()) || precision.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let chol = Cholesky::new(precision)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mean = chol.solve(&rhs);
        if mean.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(WlsProposal {
            mean,
            chol,
            log_det,
            log_lik,
        })
    }

    fn log_prior(&self, theta: &DVector<f64>) -> f64 {
        -0.5 * theta
            .iter()
            .zip(self.prior_prec.iter())
            .map(|(t, p)| t * t * p)
            .sum::<f64>()
    }
}

/// Log density (up to the dimension constant) of N(mean, A^{-1}) at x.
fn proposal_log_density(p: &WlsProposal, x: &DVector<f64>) -> f64 {
    let diff = x - &p.mean;
    let half_quad = 0.5 * (p.chol.l_dirty().transpose() * diff).norm_squared();
    0.5 * p.log_det - half_quad
}

/// One MH step with the WLS proposal evaluated at the current state; the
/// acceptance ratio includes both asymmetric proposal densities. Any
/// non-finite intermediate rejects the step, keeping the current value.
pub(crate) fn gamerman_step<R: Rng>(
    target: &GlmTarget<'_>,
    theta: &DVector<f64>,
    rng: &mut R,
) -> (DVector<f64>, bool) {
    let p = theta.len();
    let Some(fwd) = target.wls_at(theta) else {
        return (theta.clone(), false);
    };
    // Draw theta' = m + L^{-T} xi with A = L L'.
    let xi = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let Some(step) = fwd.chol.l_dirty().transpose().solve_upper_triangular(&xi) else {
        return (theta.clone(), false);
    };
    let proposal = &fwd.mean + step;
    let Some(rev) = target.wls_at(&proposal) else {
        return (theta.clone(), false);
    };
    let log_accept = rev.log_lik + target.log_prior(&proposal)
        + proposal_log_density(&rev, theta)
        - fwd.log_lik
        - target.log_prior(theta)
        - proposal_log_density(&fwd, &proposal);
    if log_accept.is_finite() && rng.random::<f64>().ln() < log_accept {
        (proposal, true)
    } else {
        (theta.clone(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    #[test]
    fn reflection_at_boundaries() {
        let eps = 1e-3;
        assert!((reflect_angle(PI + eps) - (PI - eps)).abs() < 1e-12);
        assert!((reflect_angle(-eps) - eps).abs() < 1e-12);
        assert!((reflect_angle(2.0 * PI + 0.4) - 0.4).abs() < 1e-12);
        let inside = 1.234;
        assert_eq!(reflect_angle(inside), inside);
    }

    #[test]
    fn adaptation_moves_scale_toward_target() {
        let mut a = Adapt::new(1.0, 0.44, 50);
        for i in 1..=200 {
            a.update(i, true);
        }
        assert!(a.scale() > 1.0, "always-accept should grow the scale");
        let mut b = Adapt::new(1.0, 0.44, 50);
        for i in 1..=200 {
            b.update(i, false);
        }
        assert!(b.scale() < 1.0, "always-reject should shrink the scale");
    }

    #[test]
    fn prior_dominates_when_variance_vanishes() {
        // With prior variance -> 0 the WLS proposal collapses to the prior mean 0.
        let n = 30;
        let design = DMatrix::from_fn(n, 1, |i, _| (i as f64 / n as f64) - 0.5);
        let offset = DVector::zeros(n);
        let counts: Vec<u64> = (0..n).map(|i| (i % 3) as u64).collect();
        let prec = DVector::from_element(1, 1e12);
        let t = GlmTarget {
            design: &design,
            offset: &offset,
            prior_prec: &prec,
            counts: &counts,
        };
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let theta = DVector::from_element(1, 0.3);
        let (new, _) = gamerman_step(&t, &theta, &mut rng);
        assert!(new[0].abs() < 1e-4, "collapsed proposal, got {}", new[0]);
    }

    #[test]
    fn stationary_law_matches_grid_posterior() {
        use rand_distr::{Distribution, Poisson};
        // Single covariate, offset fixed: the chain's stationary law of
        // beta_1 must match the 1-D posterior computed by quadrature.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(8);
        let n = 40;
        let design = DMatrix::from_fn(n, 1, |i, _| ((i as f64 * 0.61).sin()));
        let offset = DVector::from_element(n, 0.8);
        let truth = 0.6;
        let counts: Vec<u64> = (0..n)
            .map(|i| {
                let lambda = (design[(i, 0)] * truth + offset[i]).exp();
                Poisson::new(lambda).unwrap().sample(&mut rng) as u64
            })
            .collect();
        let prior_var = 100.0;
        let prec = DVector::from_element(1, 1.0 / prior_var);
        let t = GlmTarget {
            design: &design,
            offset: &offset,
            prior_prec: &prec,
            counts: &counts,
        };
        let mut current = DVector::from_element(1, 0.0);
        let mut draws = Vec::with_capacity(10_000);
        for it in 0..11_000 {
            let (next, _) = gamerman_step(&t, &current, &mut rng);
            current = next;
            if it >= 1_000 {
                draws.push(current[0]);
            }
        }
        // Grid posterior over beta.
        let lo = -1.0;
        let hi = 2.5;
        let steps = 7_000usize;
        let mut dens = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let b = lo + (hi - lo) * k as f64 / steps as f64;
            let mut ll = -0.5 * b * b / prior_var;
            for i in 0..n {
                let eta = design[(i, 0)] * b + offset[i];
                ll += -(eta.exp()) + counts[i] as f64 * eta;
            }
            dens.push(ll);
        }
        let m = dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = dens.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = dens.iter().sum();
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut cdf = 0.0;
        let mut ks = 0.0f64;
        for (k, d) in dens.iter().enumerate() {
            cdf += d / total;
            let b = lo + (hi - lo) * k as f64 / steps as f64;
            let emp = sorted.partition_point(|v| v <= &b) as f64 / sorted.len() as f64;
            ks = ks.max((emp - cdf).abs());
        }
        assert!(ks < 0.05, "KS distance {ks} against grid posterior");
    }

    #[test]
    fn acceptance_near_one_at_the_mode() {
        use rand_distr::{Distribution, Poisson};
        // Simulate y at a fixed coefficient, start the chain at the
        // posterior mode: the WLS proposal approximates the target well and
        // nearly every step accepts.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let n = 50;
        let design = DMatrix::from_fn(n, 1, |i, _| (i as f64 / n as f64) - 0.5);
        let offset = DVector::from_element(n, 1.0);
        let truth = 0.8;
        let counts: Vec<u64> = (0..n)
            .map(|i| {
                let lambda = (design[(i, 0)] * truth + offset[i]).exp();
                Poisson::new(lambda).unwrap().sample(&mut rng) as u64
            })
            .collect();
        let prec = DVector::from_element(1, 1.0 / 100.0);
        let t = GlmTarget {
            design: &design,
            offset: &offset,
            prior_prec: &prec,
            counts: &counts,
        };
        // Newton steps to the posterior mode.
        let mut theta = DVector::from_element(1, 0.0);
        for _ in 0..50 {
            let eta = &design * &theta + &offset;
            let lambda = eta.map(f64::exp);
            let grad = design.transpose()
                * DVector::from_fn(n, |i, _| counts[i] as f64 - lambda[i])
                - DVector::from_element(1, theta[0] / 100.0);
            let hess = design.transpose() * DMatrix::from_diagonal(&lambda) * &design;
            theta[0] += grad[0] / (hess[(0, 0)] + 1.0 / 100.0);
        }
        let mut accepted = 0;
        let mut current = theta.clone();
        for _ in 0..1000 {
            let (next, acc) = gamerman_step(&t, &current, &mut rng);
            current = next;
            accepted += acc as usize;
        }
        let rate = accepted as f64 / 1000.0;
        assert!(rate > 0.9, "acceptance at the mode was {rate}");
    }
}
