//! Gaussian belief over the projected gradient `g̃ = Bᵀ∇L`.
//!
//! A one-sided difference along subspace direction `d` is modelled as the noisy
//! linear measurement `y = dᵀg̃ + ν`, `ν ~ N(0, σ_e²)`, with prior
//! `g̃ ~ N(0, σ_p² I_k)`. [`PosteriorState::kalman_update`] folds one
//! measurement into the belief; [`batch_posterior`] computes the same posterior
//! in closed form and serves as the oracle for it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Power iteration: relative tolerance on the Rayleigh residual.
pub const POWER_TOL: f64 = 1e-8;
/// Power iteration: iteration cap per start vector.
pub const POWER_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Direction in subspace coordinates.
    pub d: Vec<f64>,
    /// Measured one-sided difference along `d`.
    pub y: f64,
}

impl Observation {
    pub fn new(d: Vec<f64>, y: f64) -> Self {
        Observation { d, y }
    }

    /// Observation along the `i`-th coordinate axis (0-based) of a `k`-dim subspace.
    pub fn axis(k: usize, i: usize, y: f64) -> Self {
        let mut d = vec![0.0; k];
        d[i] = 1.0;
        Observation { d, y }
    }

    pub fn norm(&self) -> f64 {
        self.d.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Posterior `N(μ, Σ)` over `g̃` plus the adaptive noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    sigma_e2: f64,
    sigma_p2: f64,
    alpha: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl PosteriorState {
    /// Prior state: `μ = 0`, `Σ = σ_p² I_k`.
    ///
    /// `alpha` may be 0, which freezes `σ_e²` (the fixed-noise setting used by
    /// the convergence checks); otherwise it must lie in `(0, 1)`.
    pub fn new(k: usize, sigma_p2: f64, sigma_e2: f64, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("subspace dimension k must be at least 1"));
        }
        check_positive("sigma_p2", sigma_p2)?;
        check_positive("sigma_e2", sigma_e2)?;
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(PosteriorState {
            mu: DVector::zeros(k),
            sigma: DMatrix::identity(k, k) * sigma_p2,
            sigma_e2,
            sigma_p2,
            alpha,
        })
    }

    /// Resets `μ` and `Σ` to the prior, keeping the adapted `σ_e²`.
    pub fn reset(&mut self) {
        self.mu.fill(0.0);
        self.sigma.fill(0.0);
        self.sigma.fill_diagonal(self.sigma_p2);
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e2
    }

    pub fn sigma_p2(&self) -> f64 {
        self.sigma_p2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_sigma_e2(&mut self, v: f64) -> Result<()> {
        check_positive("sigma_e2", v)?;
        self.sigma_e2 = v;
        Ok(())
    }

    fn direction(&self, obs: &Observation) -> Result<DVector<f64>> {
        if obs.d.len() != self.k() {
            return Err(invalid(format!(
                "observation direction has length {}, posterior has k = {}",
                obs.d.len(),
                self.k()
            )));
        }
        if !obs.y.is_finite() || obs.d.iter().any(|x| !x.is_finite()) {
            return Err(invalid("observation must be finite"));
        }
        Ok(DVector::from_column_slice(&obs.d))
    }

    /// Rank-1 conditioning with the current `σ_e²`:
    /// `K = Σd / (dᵀΣd + σ_e²)`, `μ ← μ + K(y − dᵀμ)`, `Σ ← Σ − K dᵀΣ`.
    pub fn kalman_update(&mut self, obs: &Observation) -> Result<()> {
        self.kalman_update_with_noise(obs, self.sigma_e2)
    }

    /// Rank-1 conditioning with an explicit measurement variance.
    pub fn kalman_update_with_noise(&mut self, obs: &Observation, noise_var: f64) -> Result<()> {
        let d = self.direction(obs)?;
        let sd = &self.sigma * &d;
        let s = d.dot(&sd) + noise_var;
        if s.is_nan() || s <= 0.0 || s.is_infinite() {
            return Err(Error::NumericalDegeneracy(format!(
                "innovation variance dᵀΣd + σ_e² = {s}"
            )));
        }
        let innovation = obs.y - d.dot(&self.mu);
        self.mu.axpy(innovation / s, &sd, 1.0);
        // Σ − (Σd)(Σd)ᵀ/s, Σ symmetric
        self.sigma.ger(-1.0 / s, &sd, &sd, 1.0);
        symmetrize(&mut self.sigma);
        Ok(())
    }

    /// Residual-based noise adaptation:
    /// `r = (y − dᵀμ)/‖d‖`, `σ_e² ← (1 − α)σ_e² + α r²`. Returns `r`.
    ///
    /// `σ_e²` is floored at the smallest positive normal `f64` so that it stays
    /// strictly positive after long runs of zero residuals.
    pub fn residual_update(&mut self, obs: &Observation) -> Result<f64> {
        let d = self.direction(obs)?;
        let norm = d.norm();
        if norm == 0.0 {
            return Err(invalid("residual update needs a non-zero direction"));
        }
        let r = (obs.y - d.dot(&self.mu)) / norm;
        let next = (1.0 - self.alpha) * self.sigma_e2 + self.alpha * r * r;
        if !next.is_finite() {
            return Err(Error::NumericalDegeneracy(format!(
                "residual update produced σ_e² = {next}"
            )));
        }
        self.sigma_e2 = next.max(f64::MIN_POSITIVE);
        Ok(r)
    }

    /// 0-based index of the largest diagonal entry of `Σ`; lowest index on ties.
    pub fn max_uncertainty_axis(&self) -> usize {
        let diag = self.sigma.diagonal();
        let mut best = 0;
        for i in 1..diag.len() {
            if diag[i] > diag[best] {
                best = i;
            }
        }
        best
    }

    /// `Γ = I − σ_p⁻² Σ`.
    pub fn shrinkage_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.k(), self.k()) - &self.sigma / self.sigma_p2
    }

    /// `tr(Γ)/k = 1 − tr(Σ)/(k σ_p²)`.
    pub fn effective_shrinkage(&self) -> f64 {
        1.0 - self.sigma.trace() / (self.k() as f64 * self.sigma_p2)
    }
}

/// `(Σ + Σᵀ)/2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `γ = σ_p² / (σ_p² + σ_e²)`.
pub fn shrinkage_factor(sigma_p2: f64, sigma_e2: f64) -> Result<f64> {
    check_positive("sigma_p2", sigma_p2)?;
    check_positive("sigma_e2", sigma_e2)?;
    Ok(sigma_p2 / (sigma_p2 + sigma_e2))
}

/// Closed-form posterior after the observations stacked in `design` (`m × k`, one
/// row per direction) with measurements `y` and diagonal noise variances
/// `noise_diag`:
///
/// `Σ = (σ_p⁻² I + DᵀR⁻¹D)⁻¹`, `μ = Σ DᵀR⁻¹ Y`.
///
/// An empty design (`m = 0`) returns the prior.
pub fn batch_posterior(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_p2: f64,
    noise_diag: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_positive("sigma_p2", sigma_p2)?;
    let (m, k) = design.shape();
    if k == 0 {
        return Err(invalid("design matrix needs at least one column"));
    }
    if y.len() != m || noise_diag.len() != m {
        return Err(invalid(format!(
            "design has {m} rows but {} measurements and {} noise variances",
            y.len(),
            noise_diag.len()
        )));
    }
    if let Some(r) = noise_diag.iter().find(|r| r.is_nan() || **r <= 0.0) {
        return Err(invalid(format!(
            "noise variances must be positive, got {r}"
        )));
    }
    let r_inv = noise_diag.map(|r| 1.0 / r);
    // DᵀR⁻¹ as k × m
    let mut dt_rinv = design.transpose();
    for (mut col, w) in dt_rinv.column_iter_mut().zip(r_inv.iter()) {
        col *= *w;
    }
    let precision = DMatrix::identity(k, k) / sigma_p2 + &dt_rinv * design;
    let chol = precision.cholesky().ok_or_else(|| {
        Error::NumericalDegeneracy("posterior precision is not positive definite".into())
    })?;
    let mut sigma = chol.inverse();
    symmetrize(&mut sigma);
    let mu = &sigma * (dt_rinv * y);
    Ok((mu, sigma))
}

/// Result of [`principal_eigenvector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Principal {
    /// Unit vector, sign fixed so that its largest-magnitude entry is positive.
    pub vector: DVector<f64>,
    /// Rayleigh quotient `vᵀΣv`.
    pub value: f64,
    /// Set when `Σ` is the zero matrix; `vector` is then `e₁`.
    pub degenerate: bool,
}

fn rayleigh(sigma: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(sigma * v))
}

fn power_iterate(sigma: &DMatrix<f64>, start: DVector<f64>) -> (DVector<f64>, f64) {
    let mut v = start;
    let mut lambda = rayleigh(sigma, &v);
    for _ in 0..POWER_MAX_ITERS {
        let w = sigma * &v;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        let resid = (&w - &v * lambda).norm();
        if resid <= POWER_TOL * lambda.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        v = w / norm;
        lambda = rayleigh(sigma, &v);
    }
    (v, lambda)
}

fn fix_sign(v: &mut DVector<f64>) {
    let mut pivot = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[pivot].abs() * (1.0 + 1e-12) {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
}

/// Unit eigenvector of the largest eigenvalue of a symmetric PSD matrix.
///
/// Power iteration (tolerance [`POWER_TOL`], at most [`POWER_MAX_ITERS`]
/// iterations) from `e₁`. A start vector orthogonal to the top eigenspace
/// converges to a smaller eigenvalue, so the iteration is repeated from
/// `(1,…,1)/√k` and from the max-diagonal axis and the largest Rayleigh
/// quotient is kept. Ties go to the earlier start, so `γI` yields `e₁`.
pub fn principal_eigenvector(sigma: &DMatrix<f64>) -> Result<Principal> {
    let k = sigma.nrows();
    if k == 0 || sigma.ncols() != k {
        return Err(invalid(
            "principal_eigenvector needs a non-empty square matrix",
        ));
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(invalid("principal_eigenvector needs a finite matrix"));
    }
    let e1 = {
        let mut e = DVector::zeros(k);
        e[0] = 1.0;
        e
    };
    if sigma.iter().all(|&x| x == 0.0) {
        return Ok(Principal {
            vector: e1,
            value: 0.0,
            degenerate: true,
        });
    }

    let (mut best_v, mut best_l) = power_iterate(sigma, e1);
    let ones = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mut argmax = DVector::zeros(k);
    argmax[sigma.diagonal().imax()] = 1.0;
    for start in [ones, argmax] {
        let (v, l) = power_iterate(sigma, start);
        if l > best_l * (1.0 + 1e-12) {
            best_v = v;
            best_l = l;
        }
    }
    best_v.normalize_mut();
    fix_sign(&mut best_v);
    Ok(Principal {
        value: rayleigh(sigma, &best_v),
        vector: best_v,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn prior_is_isotropic() {
        let s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        assert_eq!(s.mu().as_slice(), &[0.0, 0.0]);
        assert_eq!(s.sigma(), &DMatrix::identity(2, 2));
        let s = PosteriorState::new(1, 2.0, 1.0, 0.3).unwrap();
        assert_eq!(s.sigma()[(0, 0)], 2.0);
    }

    #[test]
    fn invalid_priors_are_rejected() {
        assert!(PosteriorState::new(0, 1.0, 1.0, 0.3).is_err());
        assert!(PosteriorState::new(2, 0.0, 1.0, 0.3).is_err());
        assert!(PosteriorState::new(2, 1.0, -1.0, 0.3).is_err());
        assert!(PosteriorState::new(2, 1.0, 1.0, 1.0).is_err());
        assert!(PosteriorState::new(2, 1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn first_axis_update() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        s.kalman_update(&Observation::axis(2, 0, 2.0)).unwrap();
        assert_abs_diff_eq!(s.mu()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.mu()[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma()[(1, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma()[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_mean_but_shrinks_variance() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        s.kalman_update(&Observation::axis(2, 0, 2.0)).unwrap();
        let mu = s.mu().clone();
        let d = vec![0.6, 0.8];
        let y = 0.6 * mu[0] + 0.8 * mu[1];
        let dv = DVector::from_column_slice(&d);
        let before = dv.dot(&(s.sigma() * &dv));
        s.kalman_update(&Observation::new(d, y)).unwrap();
        assert_abs_diff_eq!((s.mu() - mu).norm(), 0.0, epsilon = 1e-15);
        assert!(dv.dot(&(s.sigma() * &dv)) < before);
    }

    #[test]
    fn huge_noise_is_uninformative() {
        let mut s = PosteriorState::new(3, 1.0, 1e12, 0.3).unwrap();
        let prior = s.clone();
        s.kalman_update(&Observation::new(vec![0.3, -0.2, 0.9], 5.0))
            .unwrap();
        assert!((s.mu() - prior.mu()).amax() < 1e-8);
        assert!((s.sigma() - prior.sigma()).amax() < 1e-8);
    }

    #[test]
    fn degenerate_innovation_variance_errors() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        let err = s.kalman_update_with_noise(&Observation::new(vec![0.0, 0.0], 1.0), 0.0);
        assert!(matches!(err, Err(Error::NumericalDegeneracy(_))));
    }

    #[test]
    fn residual_formula() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        s.kalman_update(&Observation::axis(2, 0, 2.0)).unwrap(); // μ = (1, 0)
        let r = s.residual_update(&Observation::axis(2, 0, 3.0)).unwrap();
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma_e2(), 1.9, epsilon = 1e-15);
        // pure decay on zero residual
        s.residual_update(&Observation::axis(2, 0, 1.0)).unwrap();
        assert_abs_diff_eq!(s.sigma_e2(), 0.7 * 1.9, epsilon = 1e-15);
    }

    #[test]
    fn residual_normalizes_by_direction_norm() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.5).unwrap();
        let r = s
            .residual_update(&Observation::new(vec![3.0, 4.0], 10.0))
            .unwrap();
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-15);
        assert!(s
            .residual_update(&Observation::new(vec![0.0, 0.0], 1.0))
            .is_err());
    }

    #[test]
    fn residual_keeps_noise_positive() {
        let mut s = PosteriorState::new(1, 1.0, 1e-300, 0.9).unwrap();
        for _ in 0..100 {
            s.residual_update(&Observation::axis(1, 0, 0.0)).unwrap();
        }
        assert!(s.sigma_e2() > 0.0);
    }

    #[test]
    fn max_axis_tie_breaks_low() {
        let mut s = PosteriorState::new(2, 1.0, 1.0, 0.3).unwrap();
        s.sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        assert_eq!(s.max_uncertainty_axis(), 1);
        s.sigma = DMatrix::identity(2, 2) * 0.5;
        assert_eq!(s.max_uncertainty_axis(), 0);
        let mut s = PosteriorState::new(3, 1.0, 1.0, 0.3).unwrap();
        s.sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.9, 0.9]));
        assert_eq!(s.max_uncertainty_axis(), 1);
    }

    #[test]
    fn shrinkage_values() {
        assert_eq!(shrinkage_factor(1.0, 1.0).unwrap(), 0.5);
        assert_abs_diff_eq!(
            shrinkage_factor(2.0, 1.0).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        assert!(shrinkage_factor(1.0, 1e-12).unwrap() > 1.0 - 1e-11);
        assert!(shrinkage_factor(0.0, 1.0).is_err());
        assert!(shrinkage_factor(1.0, -1.0).is_err());
    }

    #[test]
    fn empty_batch_is_prior() {
        let (mu, sigma) = batch_posterior(
            &DMatrix::zeros(0, 3),
            &DVector::zeros(0),
            2.0,
            &DVector::zeros(0),
        )
        .unwrap();
        assert_eq!(mu, DVector::zeros(3));
        assert_abs_diff_eq!(
            (sigma - DMatrix::identity(3, 3) * 2.0).amax(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn identity_design_reduces_to_shrinkage() {
        let k = 4;
        let (sp, se) = (1.5, 0.7);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let (mu, sigma) = batch_posterior(
            &DMatrix::identity(k, k),
            &y,
            sp,
            &DVector::from_element(k, se),
        )
        .unwrap();
        let g = sp / (sp + se);
        assert_abs_diff_eq!((mu - &y * g).amax(), 0.0, epsilon = 1e-14);
        // per-axis variance is (1/σ_p² + 1/σ_e²)⁻¹ = γ σ_e²
        assert_abs_diff_eq!(
            (sigma - DMatrix::identity(k, k) * (g * se)).amax(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn batch_rejects_bad_shapes() {
        let d = DMatrix::identity(2, 2);
        assert!(
            batch_posterior(&d, &DVector::zeros(3), 1.0, &DVector::from_element(2, 1.0)).is_err()
        );
        assert!(batch_posterior(
            &d,
            &DVector::zeros(2),
            1.0,
            &DVector::from_vec(vec![1.0, 0.0])
        )
        .is_err());
        assert!(
            batch_posterior(&d, &DVector::zeros(2), 0.0, &DVector::from_element(2, 1.0)).is_err()
        );
    }

    #[test]
    fn eigenvector_examples() {
        let p = principal_eigenvector(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])))
            .unwrap();
        assert_abs_diff_eq!(p.vector[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p.vector[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.value, 2.0, epsilon = 1e-12);

        let p =
            principal_eigenvector(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(p.vector[0], h, epsilon = 1e-8);
        assert_abs_diff_eq!(p.vector[1], h, epsilon = 1e-8);

        let p = principal_eigenvector(&(DMatrix::identity(3, 3) * 0.25)).unwrap();
        assert_eq!(p.vector.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(!p.degenerate);

        let p = principal_eigenvector(&DMatrix::zeros(3, 3)).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.vector.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn eigenvector_escapes_orthogonal_start() {
        // e₁ is an eigenvector (λ = 1) orthogonal to the principal one (λ = 1.1).
        #[rustfmt::skip]
        let s = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.0, 0.0,
            0.0, 0.6, 0.5,
            0.0, 0.5, 0.6,
        ]);
        let p = principal_eigenvector(&s).unwrap();
        assert_abs_diff_eq!(p.value, 1.1, epsilon = 1e-8);
        assert_abs_diff_eq!(p.vector[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn sign_convention() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, -0.9, -0.9, 2.0]);
        let p = principal_eigenvector(&s).unwrap();
        let i = p.vector.iamax();
        assert!(p.vector[i] > 0.0);
    }
}
