use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, ObjectiveName, ObjectiveSpec, OptimizerGrid};
use super::run::{best_per_variant, grid_summary, run_experiment, GridEntry};
use crate::error::Result;
use crate::objective::{GradientNoise, MinibatchId, Objective, Precision, SyntheticObjective};
use crate::optimizer::{one_sided_difference, Optimizer, OptimizerConfig, Variant};
use crate::perturbation::{
    derive_seed, gaussian_vector, GaussianStream, PerturbationSeed, SubspaceBasis,
};
use crate::posterior::{
    batch_posterior, principal_eigenvector, shrinkage_factor, Observation, PosteriorState,
};

/// One pass/fail line of a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured statistic (max error, ratio, z-score, ...).
    pub value: f64,
    /// What `value` was compared against.
    pub limit: f64,
    pub detail: String,
    /// Informational checks are reported but do not decide the suite result.
    pub gating: bool,
}

impl Check {
    fn new(name: &str, passed: bool, value: f64, limit: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            value,
            limit,
            detail,
            gating: true,
        }
    }

    fn info(mut self) -> Self {
        self.gating = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub checks: Vec<Check>,
    /// Supporting tables and curves.
    pub data: serde_json::Value,
}

impl VerifyReport {
    /// All gating checks passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Running mean and variance per component.
#[derive(Debug, Clone)]
pub struct MeanVar {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MeanVar {
    pub fn new(dim: usize) -> Self {
        MeanVar {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of each component mean.
    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }

    /// Largest `|mean − target| / SE` over components.
    pub fn max_z(&self, target: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(self.std_err())
            .zip(target)
            .map(|((m, se), t)| {
                let d = (m - t).abs();
                if se > 0.0 {
                    d / se
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

fn normal_vec(stream: &mut GaussianStream, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    stream.fill(&mut v);
    v
}

fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// posterior

/// Sequential Kalman updates against the closed-form batch posterior on random
/// instances with `k ≤ 8`, `m ≤ 16`. Half the instances use per-observation
/// noise variances. Passes at relative Frobenius error ≤ 1e-10.
pub fn check_batch_equivalence(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_at = (0, 0, 0);
    for inst in 0..instances {
        let k = rng.random_range(1..=8usize);
        let m = rng.random_range(1..=16usize);
        let sigma_p2 = rng.random_range(0.2..3.0);
        let sigma_e2 = rng.random_range(0.05..2.0);
        let hetero = inst % 2 == 1;
        let mut g = GaussianStream::new(PerturbationSeed(rng.random()));

        let mut state = PosteriorState::new(k, sigma_p2, sigma_e2, 0.0)?;
        let mut design = DMatrix::zeros(m, k);
        let mut ys = DVector::zeros(m);
        let mut noise = DVector::zeros(m);
        for row in 0..m {
            let d: Vec<f64> = match rng.random_range(0..3) {
                0 => Observation::axis(k, rng.random_range(0..k), 0.0).d,
                _ => normal_vec(&mut g, k),
            };
            let y = 2.0 * g.next_normal();
            let r = if hetero {
                rng.random_range(0.05..2.0)
            } else {
                sigma_e2
            };
            let obs = Observation::new(d.clone(), y);
            if hetero {
                state.kalman_update_with_noise(&obs, r)?;
            } else {
                state.kalman_update(&obs)?;
            }
            design
                .row_mut(row)
                .copy_from(&DVector::from_vec(d).transpose());
            ys[row] = y;
            noise[row] = r;
        }
        let (mu, sigma) = batch_posterior(&design, &ys, sigma_p2, &noise)?;
        let err_sigma = rel_fro(state.sigma(), &sigma);
        let err_mu = (state.mu() - &mu).norm() / mu.norm().max(f64::MIN_POSITIVE);
        let err = err_sigma.max(err_mu);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_at = (inst, k, m);
        }
    }
    Ok(Check::new(
        "batch_equivalence",
        worst <= 1e-10,
        worst,
        1e-10,
        format!(
            "{instances} instances; worst relative Frobenius error at instance {} (k={}, m={})",
            worst_at.0, worst_at.1, worst_at.2
        ),
    ))
}

/// `k` coordinate-axis updates with fixed `σ_e²` give `μ = γY` and
/// `Σ = (σ_p⁻² + σ_e⁻²)⁻¹ I = γσ_e² I`, to 1e-12 absolute.
pub fn check_coordinate_exactness(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_gamma_eff: f64 = 0.0;
    for &k in &[1usize, 2, 4, 8] {
        for _ in 0..pairs {
            let sigma_p2: f64 = 10f64.powf(rng.random_range(-1.0..1.0));
            let sigma_e2: f64 = 10f64.powf(rng.random_range(-2.0..1.0));
            let gamma = shrinkage_factor(sigma_p2, sigma_e2)?;
            let mut state = PosteriorState::new(k, sigma_p2, sigma_e2, 0.0)?;
            let mut g = GaussianStream::new(PerturbationSeed(rng.random()));
            let y = normal_vec(&mut g, k);
            for (i, &yi) in y.iter().enumerate() {
                state.kalman_update(&Observation::axis(k, i, yi))?;
            }
            let mu_err = state
                .mu()
                .iter()
                .zip(&y)
                .map(|(m, yi)| (m - gamma * yi).abs())
                .fold(0.0, f64::max);
            let sigma_err = (state.sigma() - DMatrix::identity(k, k) * (gamma * sigma_e2)).amax();
            worst = worst.max(mu_err).max(sigma_err);
            worst_gamma_eff = worst_gamma_eff.max((state.effective_shrinkage() - gamma).abs());
        }
    }
    Ok(Check::new(
        "coordinate_exactness",
        worst <= 1e-12,
        worst,
        1e-12,
        format!(
            "k in {{1,2,4,8}} x {pairs} (σ_p², σ_e²) pairs; max |γ_eff − γ| = {worst_gamma_eff:.3e}"
        ),
    ))
}

/// Direction rule for the `τ > k` updates of [`check_shrinkage_unbiasedness`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sampling {
    /// Fresh observation along the axis with the largest posterior variance.
    Coordinate,
    /// Fresh observation along the principal eigenvector of `Σ`.
    Eigenvector,
}

/// Monte Carlo check of `E[μ] = (I − σ_p⁻²Σ) g̃*` with fixed `σ_e²` and
/// observations `y = dᵀg̃* + N(0, σ_e²‖d‖²)`. Passes when every component is
/// within 3 standard errors.
pub fn check_shrinkage_unbiasedness(
    k: usize,
    m: usize,
    trials: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Check> {
    let (sigma_p2, sigma_e2) = (1.0, 0.5);
    let mut g = GaussianStream::new(PerturbationSeed(derive_seed(seed, 0)));
    let truth = DVector::from_vec(normal_vec(&mut g, k));
    let mut acc = MeanVar::new(k);
    let mut expected: Option<Vec<f64>> = None;
    let mut noise = GaussianStream::new(PerturbationSeed(derive_seed(seed, 1)));
    let mut state = PosteriorState::new(k, sigma_p2, sigma_e2, 0.0)?;
    for _ in 0..trials {
        state.reset();
        for tau in 0..m {
            let d: DVector<f64> = if tau < k {
                DVector::from_vec(Observation::axis(k, tau, 0.0).d)
            } else {
                match sampling {
                    Sampling::Coordinate => {
                        DVector::from_vec(Observation::axis(k, state.max_uncertainty_axis(), 0.0).d)
                    }
                    Sampling::Eigenvector => principal_eigenvector(state.sigma())?.vector,
                }
            };
            let y = d.dot(&truth) + sigma_e2.sqrt() * d.norm() * noise.next_normal();
            state.kalman_update(&Observation::new(d.iter().copied().collect(), y))?;
        }
        if expected.is_none() {
            // Σ does not depend on the measurements, so Γ is the same every trial
            expected = Some(
                (state.shrinkage_matrix() * &truth)
                    .iter()
                    .copied()
                    .collect(),
            );
        }
        acc.push(state.mu().as_slice());
    }
    let expected = expected.unwrap_or_default();
    let z = acc.max_z(&expected);
    Ok(Check::new(
        match sampling {
            Sampling::Coordinate => "shrinkage_unbiased_coordinate",
            Sampling::Eigenvector => "shrinkage_unbiased_eigenvector",
        },
        z <= 3.0,
        z,
        3.0,
        format!("k={k}, m={m}, {trials} trials; max |z| over components"),
    ))
}

/// Fixed point of the residual EMA. Feeds `200/α` residuals of variance `v`
/// and compares `σ_e²` to `v`: once with residuals of constant magnitude `√v`,
/// once as the mean over `paths` Gaussian residual paths. Passes within 5%.
pub fn check_noise_ema(alpha: f64, v: f64, paths: usize, seed: u64) -> Result<Check> {
    let updates = (200.0 / alpha).ceil() as usize;
    let start = 1.0;

    let mut state = PosteriorState::new(1, 1.0, start, alpha)?;
    let mut sign = 1.0;
    for _ in 0..updates {
        state.residual_update(&Observation::axis(1, 0, sign * v.sqrt()))?;
        sign = -sign;
    }
    let det_err = (state.sigma_e2() - v).abs() / v;

    let mut g = GaussianStream::new(PerturbationSeed(seed));
    let mut total = 0.0;
    for _ in 0..paths {
        state.reset();
        state.set_sigma_e2(start)?;
        for _ in 0..updates {
            state.residual_update(&Observation::axis(1, 0, v.sqrt() * g.next_normal()))?;
        }
        total += state.sigma_e2();
    }
    let mc_err = (total / paths as f64 - v).abs() / v;
    let err = det_err.max(mc_err);
    Ok(Check::new(
        &format!("noise_ema_alpha{alpha}"),
        err <= 0.05,
        err,
        0.05,
        format!(
            "α={alpha}, v={v}, {updates} updates; constant-magnitude error {det_err:.2e}, \
             mean over {paths} Gaussian paths error {mc_err:.2e}"
        ),
    ))
}

/// `tr(Σ)` never increases across updates and every eigenvalue stays in `(0, σ_p²]`.
pub fn check_covariance_contracts(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut worst_excess: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=8usize);
        let sigma_p2: f64 = rng.random_range(0.2..3.0);
        let mut g = GaussianStream::new(PerturbationSeed(rng.random()));
        let mut state = PosteriorState::new(k, sigma_p2, rng.random_range(0.05..2.0), 0.3)?;
        let mut trace = state.sigma().trace();
        for _ in 0..16 {
            let obs = Observation::new(normal_vec(&mut g, k), g.next_normal());
            state.residual_update(&obs)?;
            state.kalman_update(&obs)?;
            let t = state.sigma().trace();
            let eig = state.sigma().clone().symmetric_eigen().eigenvalues;
            let hi = eig.max();
            let lo = eig.min();
            worst_excess = worst_excess.max(hi - sigma_p2).max(t - trace);
            if t > trace * (1.0 + 1e-12) || hi > sigma_p2 * (1.0 + 1e-12) || lo <= 0.0 {
                violations += 1;
            }
            trace = t;
        }
    }
    Ok(Check::new(
        "covariance_contracts",
        violations == 0,
        violations as f64,
        0.0,
        format!("{instances} sequences of 16 updates; worst excess {worst_excess:.2e}"),
    ))
}

/// The one-observation closed form: `μ = σ_p² y/(σ_p² + σ_e²)`, `Σ = γσ_e²`.
pub fn check_scalar_closed_form() -> Result<Check> {
    let (sp, se, y) = (2.0, 0.5, 3.0);
    let mut s = PosteriorState::new(1, sp, se, 0.0)?;
    s.kalman_update(&Observation::axis(1, 0, y))?;
    let gamma = sp / (sp + se);
    let err = (s.mu()[0] - gamma * y)
        .abs()
        .max((s.sigma()[(0, 0)] - gamma * se).abs());
    Ok(Check::new(
        "scalar_closed_form",
        err <= 1e-15,
        err,
        1e-15,
        "k=1, σ_p²=2, σ_e²=0.5, y=3".into(),
    ))
}

/// The posterior property suite.
pub fn verify_posterior(seed: u64) -> Result<VerifyReport> {
    let checks = vec![
        check_scalar_closed_form()?,
        check_batch_equivalence(200, derive_seed(seed, 1))?,
        check_coordinate_exactness(20, derive_seed(seed, 2))?,
        check_covariance_contracts(100, derive_seed(seed, 3))?,
        check_shrinkage_unbiasedness(4, 6, 100_000, Sampling::Coordinate, derive_seed(seed, 4))?,
        check_shrinkage_unbiasedness(4, 6, 100_000, Sampling::Eigenvector, derive_seed(seed, 5))?,
        check_noise_ema(0.3, 0.25, 10_000, derive_seed(seed, 6))?,
        check_noise_ema(0.05, 4.0, 10_000, derive_seed(seed, 7))?,
    ];
    Ok(VerifyReport {
        suite: "posterior".into(),
        checks,
        data: serde_json::Value::Null,
    })
}

// ---------------------------------------------------------------------------
// unbiasedness

/// Quadratic used by the unbiasedness suite, with a fixed off-optimum θ.
pub fn unbiasedness_problem(n: usize, seed: u64) -> Result<(SyntheticObjective, Vec<f64>)> {
    let spec = ObjectiveSpec {
        kind: ObjectiveName::Quadratic,
        dim: n,
        spectrum: [0.5, 2.0],
        b_scale: 1.0,
        ..ObjectiveSpec::default()
    };
    Ok((spec.build(seed)?, spec.initial_point(seed)))
}

/// Monte Carlo mean of `Δθ/(ηγk)` for one BSZO step from a fixed θ, compared
/// to `−∇L(θ)`. `σ_e²` is held fixed (`α = 0`) and `m = k`.
pub fn check_update_unbiasedness(n: usize, k: usize, trials: usize, seed: u64) -> Result<Check> {
    let (obj, theta0) = unbiasedness_problem(n, seed)?;
    let grad = obj.true_gradient(&theta0)?;
    let target: Vec<f64> = grad.iter().map(|g| -g).collect();
    let cfg = OptimizerConfig {
        variant: Variant::Bszo,
        eta: 1e-3,
        epsilon: 1e-4,
        k,
        m: k,
        sigma_p2: 1.0,
        sigma_e2_init: 1.0,
        alpha: 0.0,
        ..OptimizerConfig::default()
    };
    let scale = cfg.eta * shrinkage_factor(cfg.sigma_p2, cfg.sigma_e2_init)? * k as f64;
    let mut opt = Optimizer::new(cfg)?;
    let mut theta = theta0.clone();
    let mut delta = vec![0.0; n];
    let mut acc = MeanVar::new(n);
    for t in 0..trials {
        theta.copy_from_slice(&theta0);
        opt.step(
            &obj,
            &mut theta,
            derive_seed(seed, t as u64 + 1),
            MinibatchId(0),
        )?;
        for ((d, a), b) in delta.iter_mut().zip(&theta).zip(&theta0) {
            *d = (a - b) / scale;
        }
        acc.push(&delta);
    }
    let z = acc.max_z(&target);
    let worst_se = acc.std_err().into_iter().fold(0.0, f64::max);
    Ok(Check::new(
        &format!("unbiased_k{k}"),
        z <= 3.0,
        z,
        3.0,
        format!("n={n}, {trials} steps; max |z| over components, largest SE {worst_se:.3e}"),
    ))
}

pub fn verify_unbiasedness(
    n: usize,
    ks: &[usize],
    trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let checks = ks
        .iter()
        .map(|&k| check_update_unbiasedness(n, k, trials, derive_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        suite: "unbiasedness".into(),
        checks,
        data: serde_json::Value::Null,
    })
}

// ---------------------------------------------------------------------------
// rate

/// Settings for the rate-scaling experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RateSetup {
    pub n: usize,
    pub ks: Vec<usize>,
    pub threshold: f64,
    pub replicates: u32,
    pub max_steps: u64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for RateSetup {
    fn default() -> Self {
        RateSetup {
            n: 1000,
            ks: vec![1, 2, 4, 8],
            threshold: 1e-3,
            replicates: 3,
            max_steps: 200_000,
            epsilon: 1e-6,
            seed: 2024,
        }
    }
}

/// `1/(L γ ñ)` with `ñ = n + k + 1`.
pub fn theory_learning_rate(smoothness: f64, gamma: f64, n: usize, k: usize) -> f64 {
    1.0 / (smoothness * gamma * (n + k + 1) as f64)
}

/// `(k, mean steps, per-replicate steps)`; the mean is `None` when some
/// replicate never reached the threshold.
pub type RateRow = (usize, Option<f64>, Vec<Option<u64>>);

/// Steps to reach the loss threshold on the noiseless isotropic quadratic, one
/// row per `k`.
pub fn rate_table(setup: &RateSetup) -> Result<Vec<RateRow>> {
    let mut out = Vec::new();
    for &k in &setup.ks {
        let gamma = shrinkage_factor(1.0, 1.0)?;
        let cfg = ExperimentConfig {
            name: format!("rate_k{k}"),
            run_seed: setup.seed,
            replicates: setup.replicates,
            max_steps: setup.max_steps,
            loss_threshold: Some(setup.threshold),
            stop_at_threshold: true,
            objective: ObjectiveSpec {
                kind: ObjectiveName::Quadratic,
                dim: setup.n,
                spectrum: [1.0, 1.0],
                ..ObjectiveSpec::default()
            },
            optimizer: OptimizerGrid {
                variants: vec![Variant::Bszo],
                eta: vec![theory_learning_rate(1.0, gamma, setup.n, k)],
                epsilon: setup.epsilon,
                k,
                m: Some(k),
                sigma_p2: 1.0,
                sigma_e2_init: 1.0,
                alpha: 0.0,
                ..OptimizerGrid::default()
            },
            ..ExperimentConfig::default()
        };
        let records = run_experiment(&cfg)?;
        let steps: Vec<Option<u64>> = records
            .iter()
            .map(|r| r.summary.steps_to_threshold)
            .collect();
        let mean = if steps.iter().all(Option::is_some) {
            Some(steps.iter().flatten().sum::<u64>() as f64 / steps.len() as f64)
        } else {
            None
        };
        out.push((k, mean, steps));
    }
    Ok(out)
}

/// Steps-to-threshold ratios across each doubling of `k`; each must lie in [1.4, 2.6].
pub fn check_rate_scaling(setup: &RateSetup) -> Result<(Vec<Check>, serde_json::Value)> {
    let table = rate_table(setup)?;
    let mut checks = Vec::new();
    for pair in table.windows(2) {
        let (k1, s1, _) = &pair[0];
        let (k2, s2, _) = &pair[1];
        let ratio = match (s1, s2) {
            (Some(a), Some(b)) => a / b,
            _ => f64::NAN,
        };
        let scale = *k2 as f64 / *k1 as f64;
        let (lo, hi) = (1.4 * scale / 2.0, 2.6 * scale / 2.0);
        checks.push(Check::new(
            &format!("rate_k{k1}_vs_k{k2}"),
            ratio >= lo && ratio <= hi,
            ratio,
            hi,
            format!(
                "steps(k={k1}) / steps(k={k2}) must lie in [{lo}, {hi}]; means {s1:?} / {s2:?}"
            ),
        ));
    }
    let data = serde_json::json!(table
        .iter()
        .map(|(k, mean, steps)| serde_json::json!({"k": k, "mean_steps": mean, "steps": steps}))
        .collect::<Vec<_>>());
    Ok((checks, data))
}

/// Settings for the noise-floor experiment.
#[derive(Debug, Clone, Serialize)]
pub struct FloorSetup {
    pub n: usize,
    pub k: usize,
    pub noise_trace: f64,
    pub epsilon: f64,
    pub burn_in: u64,
    pub measure: u64,
    /// Steps between probes of the finite-difference error.
    pub probe_every: u64,
    pub seed: u64,
}

impl Default for FloorSetup {
    fn default() -> Self {
        FloorSetup {
            n: 1000,
            k: 4,
            noise_trace: 1e-2,
            epsilon: 1e-4,
            burn_in: 3000,
            measure: 30_000,
            probe_every: 50,
            seed: 77,
        }
    }
}

/// Plateau of `‖∇L‖²` under injected gradient noise against
/// `tr(Σ) + (n/ñ) σ_ε²`, with `σ_ε²` measured along the trajectory as the
/// mean squared gap between the one-sided difference and `zᵀ(∇L + ζ)`.
pub fn check_noise_floor(setup: &FloorSetup) -> Result<(Check, serde_json::Value)> {
    let n = setup.n;
    let obj = SyntheticObjective::isotropic_quadratic(n)?.with_noise(
        GradientNoise::with_trace(setup.noise_trace, n),
        derive_seed(setup.seed, 1),
    )?;
    let gamma = shrinkage_factor(1.0, 1.0)?;
    let cfg = OptimizerConfig {
        variant: Variant::Bszo,
        eta: theory_learning_rate(1.0, gamma, n, setup.k),
        epsilon: setup.epsilon,
        k: setup.k,
        m: setup.k,
        sigma_p2: 1.0,
        sigma_e2_init: 1.0,
        alpha: 0.0,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg)?;
    let mut theta = vec![0.0; n];
    let mut plateau = 0.0;
    let mut fd_err = 0.0;
    let mut probes = 0u64;
    for t in 0..setup.burn_in + setup.measure {
        let batch = MinibatchId(t);
        opt.step(&obj, &mut theta, derive_seed(setup.seed, t + 2), batch)?;
        if t < setup.burn_in {
            continue;
        }
        plateau += theta.iter().map(|x| x * x).sum::<f64>();
        if t % setup.probe_every == 0 {
            let probe_seed = derive_seed(derive_seed(setup.seed, u64::MAX), t);
            let basis = SubspaceBasis::from_step_seed(probe_seed, 1);
            let f0 = obj.evaluate(&theta, batch, 0)?;
            let y = one_sided_difference(
                &obj,
                &mut theta,
                &basis,
                &[1.0],
                setup.epsilon,
                f0,
                batch,
                0,
            )?;
            let z = gaussian_vector(basis.seeds()[0], n)?;
            let g = obj.stochastic_gradient(&theta, batch)?;
            let exact: f64 = z.iter().zip(&g).map(|(a, b)| a * b).sum();
            fd_err += (y - exact).powi(2);
            probes += 1;
        }
    }
    let plateau = plateau / setup.measure as f64;
    let sigma_fd2 = fd_err / probes.max(1) as f64;
    let n_tilde = (n + setup.k + 1) as f64;
    let bound = setup.noise_trace + n as f64 / n_tilde * sigma_fd2;
    let ratio = plateau / bound;
    let data = serde_json::json!({
        "plateau_grad_norm_sq": plateau,
        "measured_fd_error_var": sigma_fd2,
        "noise_trace": setup.noise_trace,
        "bound": bound,
        "ratio": ratio,
    });
    Ok((
        Check::new(
            "noise_floor",
            (0.5..=2.0).contains(&ratio),
            ratio,
            2.0,
            format!(
                "plateau ‖∇L‖² = {plateau:.4e}, tr(Σ) + (n/ñ)σ_ε² = {bound:.4e} \
                 (measured σ_ε² = {sigma_fd2:.4e}); ratio must lie in [0.5, 2]"
            ),
        ),
        data,
    ))
}

pub fn verify_rate(rate: &RateSetup, floor: &FloorSetup) -> Result<VerifyReport> {
    let (mut checks, table) = check_rate_scaling(rate)?;
    let (floor_check, floor_data) = check_noise_floor(floor)?;
    checks.push(floor_check);
    Ok(VerifyReport {
        suite: "rate".into(),
        checks,
        data: serde_json::json!({"rate": table, "noise_floor": floor_data}),
    })
}

// ---------------------------------------------------------------------------
// precision

/// Settings for the low-precision A/B experiment.
#[derive(Debug, Clone, Serialize)]
pub struct PrecisionSetup {
    pub objective: ObjectiveSpec,
    pub eta_grid: Vec<f64>,
    pub epsilon: f64,
    pub k: usize,
    pub alpha: f64,
    pub budget_passes: u64,
    pub replicates: u32,
    pub ablation_seeds: u32,
    pub seed: u64,
}

impl Default for PrecisionSetup {
    fn default() -> Self {
        PrecisionSetup {
            objective: ObjectiveSpec {
                kind: ObjectiveName::Quadratic,
                dim: 100,
                spectrum: [0.5, 1.0],
                precision: Precision::Bf16,
                jitter_std: 1e-2,
                init_scale: 3.0,
                ..ObjectiveSpec::default()
            },
            eta_grid: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0],
            epsilon: 1e-2,
            k: 2,
            alpha: 0.3,
            budget_passes: 6000,
            replicates: 3,
            ablation_seeds: 5,
            seed: 11,
        }
    }
}

impl PrecisionSetup {
    pub fn experiment(&self, variants: Vec<Variant>, alpha: f64, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: "precision".into(),
            run_seed: seed,
            replicates: self.replicates,
            max_steps: self.budget_passes,
            budget_passes: Some(self.budget_passes),
            objective: self.objective.clone(),
            optimizer: OptimizerGrid {
                variants,
                eta: self.eta_grid.clone(),
                epsilon: self.epsilon,
                k: self.k,
                m: Some(self.k + 1),
                sigma_p2: 1.0,
                sigma_e2_init: 1.0,
                alpha,
                ..OptimizerGrid::default()
            },
            ..ExperimentConfig::default()
        }
    }
}

fn best_of(grid: &[GridEntry], v: Variant) -> Option<GridEntry> {
    best_per_variant(grid)
        .into_iter()
        .find(|(var, _)| *var == v)
        .and_then(|(_, b)| b)
}

/// BSZO, BSZO-B and MeZO over an η grid at an equal forward-pass budget under
/// low-precision loss evaluation, plus an FP64 control and an `α = 0` ablation.
pub fn verify_precision_robustness(setup: &PrecisionSetup) -> Result<VerifyReport> {
    let variants = vec![Variant::Bszo, Variant::BszoB, Variant::Mezo];
    let records = run_experiment(&setup.experiment(variants.clone(), setup.alpha, setup.seed))?;
    let grid = grid_summary(&records);
    let bszo = best_of(&grid, Variant::Bszo);
    let mezo = best_of(&grid, Variant::Mezo);
    let bszo_loss = bszo.as_ref().map_or(f64::INFINITY, |g| g.mean_final_loss);
    let mezo_loss = mezo.as_ref().map_or(f64::INFINITY, |g| g.mean_final_loss);
    let bszo_div = bszo.as_ref().map_or(u32::MAX, |g| g.diverged);
    let mut checks = vec![Check::new(
        "bszo_beats_mezo",
        bszo_loss <= mezo_loss && bszo_div == 0,
        bszo_loss,
        mezo_loss,
        format!(
            "{}: best-grid mean final loss BSZO {bszo_loss:.4e} (η={:?}, {} diverged) vs MeZO \
             {mezo_loss:.4e} (η={:?}) at {} forward passes",
            setup.objective.precision,
            bszo.as_ref().map(|g| g.eta),
            if bszo_div == u32::MAX { 0 } else { bszo_div },
            mezo.as_ref().map(|g| g.eta),
            setup.budget_passes
        ),
    )];
    let div = |v: Variant| -> u32 {
        grid.iter()
            .filter(|g| g.variant == v)
            .map(|g| g.diverged)
            .sum()
    };
    checks.push(
        Check::new(
            "mezo_diverges_somewhere",
            div(Variant::Mezo) >= 1,
            div(Variant::Mezo) as f64,
            1.0,
            format!(
                "diverged cells: BSZO {}, BSZO-B {}, MeZO {}",
                div(Variant::Bszo),
                div(Variant::BszoB),
                div(Variant::Mezo)
            ),
        )
        .info(),
    );

    // control: same grid in full precision, no jitter
    let mut control = setup.clone();
    control.objective.precision = Precision::Fp64;
    control.objective.jitter_std = 0.0;
    let control_grid = grid_summary(&run_experiment(&control.experiment(
        variants.clone(),
        setup.alpha,
        setup.seed,
    ))?);
    let mut worst_ratio: f64 = 0.0;
    let initial = records.first().map_or(1.0, |r| r.summary.initial_loss);
    for v in &variants {
        let best = best_of(&control_grid, *v).map_or(f64::INFINITY, |g| g.mean_final_loss);
        worst_ratio = worst_ratio.max(best / initial);
    }
    checks.push(
        Check::new(
            "fp64_control_converges",
            worst_ratio <= 0.1,
            worst_ratio,
            0.1,
            "worst best-grid final/initial loss ratio over all methods in fp64".into(),
        )
        .info(),
    );

    // ablation: adaptive vs fixed σ_e², each at its own best η, per seed
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in 0..setup.ablation_seeds {
        let mut one = setup.clone();
        one.replicates = 1;
        let seed = derive_seed(setup.seed, 1000 + s as u64);
        let best = |alpha: f64| -> Result<f64> {
            let grid = grid_summary(&run_experiment(&one.experiment(
                vec![Variant::Bszo],
                alpha,
                seed,
            ))?);
            Ok(best_of(&grid, Variant::Bszo).map_or(f64::INFINITY, |g| g.mean_final_loss))
        };
        let (a, f) = (best(setup.alpha)?, best(0.0)?);
        if a <= f {
            wins += 1;
        }
        pairs.push((a, f));
    }
    let needed = setup.ablation_seeds.saturating_sub(1).max(1);
    checks.push(
        Check::new(
            "adaptive_noise_ablation",
            wins >= needed,
            wins as f64,
            needed as f64,
            format!(
                "best-grid BSZO with α={} vs α=0 (adaptive, fixed) per seed, {wins} of {} wins: {pairs:?}",
                setup.alpha, setup.ablation_seeds
            ),
        )
        .info(),
    );

    Ok(VerifyReport {
        suite: "precision".into(),
        checks,
        data: serde_json::json!({ "grid": grid, "control_grid": control_grid }),
    })
}
