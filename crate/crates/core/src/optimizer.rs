//! Zeroth-order step loops.
//!
//! * [`Variant::Bszo`]: probes the `k` coordinate axes of a fresh seeded
//!   subspace, caches the one-sided differences, then spends the remaining
//!   `m − k` Kalman updates re-using the cached value of the axis with the
//!   largest posterior variance (no extra forward pass). `k + 1` passes per step.
//! * [`Variant::BszoB`]: same first `k` probes, then probes the principal
//!   eigenvector of `Σ` with a real evaluation each time. `m + 1` passes per step.
//! * [`Variant::Mezo`]: central-difference SPSA along one seeded direction.
//!   2 passes per step.
//!
//! All variants finish with `θ ← θ − η Σ_i μ_i z_i`, regenerating each `z_i`
//! from its seed. The optimizer keeps `O(k²)` numbers of state between steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objective::{MinibatchId, Objective};
use crate::perturbation::{derive_seed, Basis, SubspaceBasis, DEFAULT_CHUNK};
use crate::posterior::{principal_eigenvector, Observation, PosteriorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bszo,
    BszoB,
    Mezo,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bszo => "bszo",
            Variant::BszoB => "bszo_b",
            Variant::Mezo => "mezo",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bszo" => Ok(Variant::Bszo),
            "bszo_b" => Ok(Variant::BszoB),
            "mezo" => Ok(Variant::Mezo),
            other => Err(invalid(format!("unknown optimizer variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub variant: Variant,
    /// Learning rate η.
    pub eta: f64,
    /// Perturbation scale ε.
    pub epsilon: f64,
    /// Subspace dimension.
    pub k: usize,
    /// Kalman updates per step (`m ≥ k`).
    pub m: usize,
    pub sigma_p2: f64,
    pub sigma_e2_init: f64,
    /// EMA factor for the residual noise estimate; 0 keeps `σ_e²` fixed.
    pub alpha: f64,
    pub max_steps: u64,
    /// Non-improving validation evaluations before stopping; 0 disables.
    pub early_stop_patience: u32,
    /// Steps between validation evaluations.
    pub eval_every: u64,
    /// Regeneration chunk length.
    pub chunk: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            variant: Variant::Bszo,
            eta: 1e-3,
            epsilon: 1e-4,
            k: 2,
            m: 3,
            sigma_p2: 1.0,
            sigma_e2_init: 1.0,
            alpha: 0.3,
            max_steps: 1000,
            early_stop_patience: 0,
            eval_every: 500,
            chunk: DEFAULT_CHUNK,
        }
    }
}

impl OptimizerConfig {
    /// Default BSZO settings with subspace dimension `k` and `m = k + 1`.
    pub fn bszo(k: usize) -> Self {
        OptimizerConfig {
            k,
            m: k + 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        pos("eta", self.eta)?;
        pos("epsilon", self.epsilon)?;
        if self.chunk == 0 {
            return Err(invalid("chunk must be at least 1"));
        }
        if self.variant != Variant::Mezo {
            if self.k == 0 {
                return Err(invalid("k must be at least 1"));
            }
            if self.m < self.k {
                return Err(invalid(format!(
                    "m = {} must be at least k = {}",
                    self.m, self.k
                )));
            }
            pos("sigma_p2", self.sigma_p2)?;
            pos("sigma_e2_init", self.sigma_e2_init)?;
            if !(0.0..1.0).contains(&self.alpha) {
                return Err(invalid(format!(
                    "alpha must lie in [0, 1), got {}",
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    /// Subspace dimension actually used by the variant.
    pub fn subspace_dim(&self) -> usize {
        match self.variant {
            Variant::Mezo => 1,
            _ => self.k,
        }
    }

    /// Loss evaluations per step.
    pub fn forward_passes_per_step(&self) -> u32 {
        match self.variant {
            Variant::Bszo => self.k as u32 + 1,
            Variant::BszoB => self.m as u32 + 1,
            Variant::Mezo => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Loss at the unperturbed point (MeZO: mean of the two probes).
    pub loss_f0: f64,
    pub observations: Vec<Observation>,
    pub mu_final: Vec<f64>,
    pub sigma_e2_final: f64,
    /// `1 − tr(Σ)/(k σ_p²)` after the last update; 1 for MeZO.
    pub gamma_eff: f64,
    pub forward_passes: u32,
    /// `‖Δθ‖₂`.
    pub update_norm: f64,
}

/// Seed for the jitter draw of the `pass`-th evaluation in a step.
pub fn jitter_seed(step_seed: u64, pass: u32) -> u64 {
    derive_seed(derive_seed(step_seed, u64::MAX), pass as u64)
}

/// `ŷ = (L(θ + εBd; ξ) − f0)/ε`, leaving θ restored.
///
/// `f0` must come from the same minibatch. A zero direction returns 0 without
/// evaluating.
#[allow(clippy::too_many_arguments)]
pub fn one_sided_difference<O: Objective + ?Sized, B: Basis + ?Sized>(
    obj: &O,
    theta: &mut [f64],
    basis: &B,
    d: &[f64],
    epsilon: f64,
    f0: f64,
    batch: MinibatchId,
    jitter: u64,
) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let applied = basis.displace(theta, d, epsilon)?;
    if applied.active == 0 {
        return Ok(0.0);
    }
    let value = obj.evaluate(theta, batch, jitter);
    basis.displace(theta, d, -epsilon)?;
    let value = value?;
    if !value.is_finite() {
        return Err(Error::Evaluation {
            value,
            context: format!("θ + ε·B·d with ε = {epsilon}, d = {d:?}"),
        });
    }
    Ok((value - f0) / epsilon)
}

/// `θ ← θ − η Σ_i μ_i z_i`. Returns `‖Δθ‖₂`.
pub fn apply_update<B: Basis + ?Sized>(
    theta: &mut [f64],
    basis: &B,
    mu: &[f64],
    eta: f64,
) -> Result<f64> {
    if mu.iter().any(|x| !x.is_finite()) {
        return Err(invalid("posterior mean is not finite"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid(format!("eta must be positive, got {eta}")));
    }
    Ok(basis.displace(theta, mu, -eta)?.norm_sq.sqrt())
}

fn evaluate_checked<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    batch: MinibatchId,
    jitter: u64,
    what: &str,
) -> Result<f64> {
    let v = obj.evaluate(theta, batch, jitter)?;
    if !v.is_finite() {
        return Err(Error::Evaluation {
            value: v,
            context: what.to_string(),
        });
    }
    Ok(v)
}

/// One optimizer instance. Owns the posterior buffers and the adapted `σ_e²`,
/// which carries over from step to step; `μ` and `Σ` are reset every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    posterior: PosteriorState,
    cache: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let k = config.subspace_dim();
        let posterior = match config.variant {
            Variant::Mezo => PosteriorState::new(1, 1.0, 1.0, 0.0)?,
            _ => PosteriorState::new(k, config.sigma_p2, config.sigma_e2_init, config.alpha)?,
        };
        Ok(Optimizer {
            cache: Vec::with_capacity(k),
            config,
            posterior,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn posterior(&self) -> &PosteriorState {
        &self.posterior
    }

    pub fn sigma_e2(&self) -> f64 {
        self.posterior.sigma_e2()
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Numbers held between steps: `μ` (k), `Σ` (k²), `σ_e²` (1), the
    /// difference cache (k) and the per-step seeds (k).
    pub fn aux_state_len(&self) -> usize {
        let k = self.posterior.k();
        k + k * k + 1 + self.cache.capacity().max(k) + self.config.subspace_dim()
    }

    /// The seeded basis for `step_seed`.
    pub fn basis_for(&self, step_seed: u64) -> SubspaceBasis {
        SubspaceBasis::from_step_seed(step_seed, self.config.subspace_dim())
            .with_chunk(self.config.chunk)
    }

    /// One step on minibatch `batch` with directions derived from `step_seed`.
    pub fn step<O: Objective + ?Sized>(
        &mut self,
        obj: &O,
        theta: &mut [f64],
        step_seed: u64,
        batch: MinibatchId,
    ) -> Result<StepReport> {
        let basis = self.basis_for(step_seed);
        self.step_with_basis(obj, theta, &basis, step_seed, batch)
    }

    /// One step with an explicit basis. On error θ is left at its entry value
    /// (up to the round-off of reverting each probe) and the step counter is
    /// not advanced.
    pub fn step_with_basis<O: Objective + ?Sized, B: Basis + ?Sized>(
        &mut self,
        obj: &O,
        theta: &mut [f64],
        basis: &B,
        step_seed: u64,
        batch: MinibatchId,
    ) -> Result<StepReport> {
        if theta.len() != obj.dim() {
            return Err(invalid(format!(
                "objective has dimension {}, parameters have {}",
                obj.dim(),
                theta.len()
            )));
        }
        if basis.k() != self.config.subspace_dim() {
            return Err(invalid(format!(
                "basis has {} directions, optimizer expects {}",
                basis.k(),
                self.config.subspace_dim()
            )));
        }
        let sigma_e2_entry = self.posterior.sigma_e2();
        let report = match self.config.variant {
            Variant::Bszo => self.bszo_step(obj, theta, basis, step_seed, batch),
            Variant::BszoB => self.bszo_b_step(obj, theta, basis, step_seed, batch),
            Variant::Mezo => self.mezo_step(obj, theta, basis, step_seed, batch),
        };
        match report {
            Ok(r) => {
                self.steps += 1;
                Ok(r)
            }
            Err(e) => {
                self.posterior.reset();
                self.posterior.set_sigma_e2(sigma_e2_entry)?;
                Err(e)
            }
        }
    }

    fn finish<B: Basis + ?Sized>(
        &mut self,
        theta: &mut [f64],
        basis: &B,
        loss_f0: f64,
        observations: Vec<Observation>,
        forward_passes: u32,
    ) -> Result<StepReport> {
        let mu: Vec<f64> = self.posterior.mu().iter().copied().collect();
        let update_norm = apply_update(theta, basis, &mu, self.config.eta)?;
        Ok(StepReport {
            step: self.steps,
            loss_f0,
            observations,
            mu_final: mu,
            sigma_e2_final: self.posterior.sigma_e2(),
            gamma_eff: self.posterior.effective_shrinkage(),
            forward_passes,
            update_norm,
        })
    }

    fn bszo_step<O: Objective + ?Sized, B: Basis + ?Sized>(
        &mut self,
        obj: &O,
        theta: &mut [f64],
        basis: &B,
        step_seed: u64,
        batch: MinibatchId,
    ) -> Result<StepReport> {
        let (k, m, eps) = (self.config.k, self.config.m, self.config.epsilon);
        self.posterior.reset();
        self.cache.clear();
        let f0 = evaluate_checked(obj, theta, batch, jitter_seed(step_seed, 0), "f0")?;
        let mut passes = 1u32;
        let mut observations: Vec<Observation> = Vec::with_capacity(m);

        for tau in 0..m {
            let obs = if tau < k {
                let d = Observation::axis(k, tau, 0.0).d;
                let y = one_sided_difference(
                    obj,
                    theta,
                    basis,
                    &d,
                    eps,
                    f0,
                    batch,
                    jitter_seed(step_seed, passes),
                )?;
                passes += 1;
                self.cache.push(y);
                Observation::new(d, y)
            } else {
                // residual of the previous observation against the current mean
                if let Some(prev) = observations.last() {
                    self.posterior.residual_update(prev)?;
                }
                let j = self.posterior.max_uncertainty_axis();
                Observation::axis(k, j, self.cache[j])
            };
            self.posterior.kalman_update(&obs)?;
            observations.push(obs);
        }
        self.finish(theta, basis, f0, observations, passes)
    }

    fn bszo_b_step<O: Objective + ?Sized, B: Basis + ?Sized>(
        &mut self,
        obj: &O,
        theta: &mut [f64],
        basis: &B,
        step_seed: u64,
        batch: MinibatchId,
    ) -> Result<StepReport> {
        let (k, m, eps) = (self.config.k, self.config.m, self.config.epsilon);
        self.posterior.reset();
        let f0 = evaluate_checked(obj, theta, batch, jitter_seed(step_seed, 0), "f0")?;
        let mut passes = 1u32;
        let mut observations = Vec::with_capacity(m);

        for tau in 0..m {
            let d: Vec<f64> = if tau < k {
                Observation::axis(k, tau, 0.0).d
            } else {
                principal_eigenvector(self.posterior.sigma())?
                    .vector
                    .iter()
                    .copied()
                    .collect()
            };
            let y = one_sided_difference(
                obj,
                theta,
                basis,
                &d,
                eps,
                f0,
                batch,
                jitter_seed(step_seed, passes),
            )?;
            passes += 1;
            let obs = Observation::new(d, y);
            self.posterior.residual_update(&obs)?;
            self.posterior.kalman_update(&obs)?;
            observations.push(obs);
        }
        self.finish(theta, basis, f0, observations, passes)
    }

    fn mezo_step<O: Objective + ?Sized, B: Basis + ?Sized>(
        &mut self,
        obj: &O,
        theta: &mut [f64],
        basis: &B,
        step_seed: u64,
        batch: MinibatchId,
    ) -> Result<StepReport> {
        let eps = self.config.epsilon;
        let one = [1.0];

        basis.displace(theta, &one, eps)?;
        let plus = obj.evaluate(theta, batch, jitter_seed(step_seed, 0));
        basis.displace(theta, &one, -eps)?;
        let plus = finite_or_err(plus?, "θ + εz")?;

        basis.displace(theta, &one, -eps)?;
        let minus = obj.evaluate(theta, batch, jitter_seed(step_seed, 1));
        basis.displace(theta, &one, eps)?;
        let minus = finite_or_err(minus?, "θ − εz")?;

        let g = (plus - minus) / (2.0 * eps);
        let update_norm = apply_update(theta, basis, &[g], self.config.eta)?;
        Ok(StepReport {
            step: self.steps,
            loss_f0: 0.5 * (plus + minus),
            observations: vec![Observation::new(vec![1.0], g)],
            mu_final: vec![g],
            sigma_e2_final: self.posterior.sigma_e2(),
            gamma_eff: 1.0,
            forward_passes: 2,
            update_norm,
        })
    }
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation {
            value: v,
            context: what.to_string(),
        })
    }
}
