//! Synthetic stochastic loss oracles.
//!
//! A [`SyntheticObjective`] evaluates `L(θ; ξ) = L(θ) + ζ_ξᵀθ (+ jitter)`,
//! rounded to a chosen [`Precision`]. The minibatch noise `ζ_ξ ~ N(0, Σ)` is
//! regenerated from the batch id, so the stochastic gradient is exactly
//! `∇L(θ) + ζ_ξ` and `tr(Σ)` is known. Jitter is i.i.d. Gaussian noise on the
//! loss value keyed by a per-evaluation seed, standing in for nondeterministic
//! low-precision kernels.

mod logistic;
mod quantize;

pub use logistic::LogisticData;
pub use quantize::{quantize, Precision, Quantized};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::perturbation::{derive_seed, GaussianStream, PerturbationSeed};

/// Identifies a minibatch ξ; the same id always realizes the same gradient noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MinibatchId(pub u64);

/// Stochastic loss oracle driven by the optimizers.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Observed loss on `batch`. Must be a pure function of
    /// `(θ, batch, jitter_seed)`. May return a non-finite value on overflow.
    fn evaluate(&self, theta: &[f64], batch: MinibatchId, jitter_seed: u64) -> Result<f64>;
}

/// Diagonal covariance of the additive gradient noise `ζ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum GradientNoise {
    #[default]
    None,
    /// `Σ = v·I`.
    Isotropic { variance: f64 },
    /// `Σ = diag(variances)`.
    Diagonal { variances: Vec<f64> },
}

impl GradientNoise {
    /// Isotropic noise with the given total variance `tr(Σ)` over `n` coordinates.
    pub fn with_trace(trace: f64, n: usize) -> Self {
        if trace == 0.0 {
            GradientNoise::None
        } else {
            GradientNoise::Isotropic {
                variance: trace / n as f64,
            }
        }
    }

    pub fn trace(&self, n: usize) -> f64 {
        match self {
            GradientNoise::None => 0.0,
            GradientNoise::Isotropic { variance } => variance * n as f64,
            GradientNoise::Diagonal { variances } => variances.iter().sum(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            GradientNoise::None => Ok(()),
            GradientNoise::Isotropic { variance } if variance.is_finite() && *variance >= 0.0 => {
                Ok(())
            }
            GradientNoise::Diagonal { variances }
                if variances.len() == n && variances.iter().all(|v| v.is_finite() && *v >= 0.0) =>
            {
                Ok(())
            }
            _ => Err(invalid(format!(
                "gradient noise must have non-negative finite variances for dimension {n}"
            ))),
        }
    }

    fn std_at(&self, j: usize) -> f64 {
        match self {
            GradientNoise::None => 0.0,
            GradientNoise::Isotropic { variance } => variance.sqrt(),
            GradientNoise::Diagonal { variances } => variances[j].sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    /// `½ Σ a_j θ_j² − b_j θ_j` with a positive diagonal Hessian `a`.
    Quadratic { diag: Vec<f64>, b: Vec<f64> },
    /// Chained Rosenbrock `Σ 100(θ_{i+1} − θ_i²)² + (1 − θ_i)²`, `n ≥ 2`.
    Rosenbrock { n: usize },
    /// Mean logistic loss plus `½ l2 ‖θ‖²`.
    Logistic { data: LogisticData, l2: f64 },
}

/// Result of a detailed evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    kind: ObjectiveKind,
    noise: GradientNoise,
    noise_seed: u64,
    precision: Precision,
    jitter_std: f64,
}

impl SyntheticObjective {
    pub fn new(kind: ObjectiveKind) -> Result<Self> {
        match &kind {
            ObjectiveKind::Quadratic { diag, b } => {
                if diag.is_empty() || diag.len() != b.len() {
                    return Err(invalid("quadratic needs matching non-empty diag and b"));
                }
                if diag.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return Err(invalid("quadratic Hessian diagonal must be positive"));
                }
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("quadratic linear term must be finite"));
                }
            }
            ObjectiveKind::Rosenbrock { n } if *n < 2 => {
                return Err(invalid("rosenbrock needs n >= 2"));
            }
            ObjectiveKind::Logistic { l2, .. } if !(l2.is_finite() && *l2 >= 0.0) => {
                return Err(invalid("logistic l2 must be non-negative"));
            }
            _ => {}
        }
        Ok(SyntheticObjective {
            kind,
            noise: GradientNoise::None,
            noise_seed: 0,
            precision: Precision::Fp64,
            jitter_std: 0.0,
        })
    }

    pub fn quadratic(diag: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        Self::new(ObjectiveKind::Quadratic { diag, b })
    }

    /// `½‖θ‖²`.
    pub fn isotropic_quadratic(n: usize) -> Result<Self> {
        Self::quadratic(vec![1.0; n], vec![0.0; n])
    }

    pub fn rosenbrock(n: usize) -> Result<Self> {
        Self::new(ObjectiveKind::Rosenbrock { n })
    }

    pub fn logistic(data: LogisticData, l2: f64) -> Result<Self> {
        Self::new(ObjectiveKind::Logistic { data, l2 })
    }

    pub fn with_noise(mut self, noise: GradientNoise, seed: u64) -> Result<Self> {
        noise.validate(self.dim())?;
        self.noise = noise;
        self.noise_seed = seed;
        Ok(self)
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_jitter(mut self, jitter_std: f64) -> Result<Self> {
        if !(jitter_std.is_finite() && jitter_std >= 0.0) {
            return Err(invalid("jitter std must be non-negative"));
        }
        self.jitter_std = jitter_std;
        Ok(self)
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn noise(&self) -> &GradientNoise {
        &self.noise
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn jitter_std(&self) -> f64 {
        self.jitter_std
    }

    pub fn noise_trace(&self) -> f64 {
        self.noise.trace(self.dim())
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(invalid(format!(
                "objective has dimension {}, parameters have {}",
                self.dim(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Noise-free full-precision loss `L(θ)`.
    pub fn clean_loss(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic { diag, b } => diag
                .iter()
                .zip(b)
                .zip(theta)
                .map(|((a, b), t)| 0.5 * a * t * t - b * t)
                .sum(),
            ObjectiveKind::Rosenbrock { .. } => theta
                .windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum(),
            ObjectiveKind::Logistic { data, l2 } => {
                let n = data.n_samples() as f64;
                let loss: f64 = (0..data.n_samples())
                    .map(|i| {
                        let margin = data.labels()[i] * dot(data.row(i), theta);
                        logistic::softplus(-margin)
                    })
                    .sum::<f64>()
                    / n;
                loss + 0.5 * l2 * dot(theta, theta)
            }
        })
    }

    /// Exact `∇L(θ)` in `f64`.
    pub fn true_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(theta)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic { diag, b } => diag
                .iter()
                .zip(b)
                .zip(theta)
                .map(|((a, b), t)| a * t - b)
                .collect(),
            ObjectiveKind::Rosenbrock { n } => {
                let mut g = vec![0.0; *n];
                for i in 0..n - 1 {
                    let r = theta[i + 1] - theta[i] * theta[i];
                    g[i] += -400.0 * theta[i] * r - 2.0 * (1.0 - theta[i]);
                    g[i + 1] += 200.0 * r;
                }
                g
            }
            ObjectiveKind::Logistic { data, l2 } => {
                let n = data.n_samples() as f64;
                let mut g: Vec<f64> = theta.iter().map(|t| l2 * t).collect();
                for i in 0..data.n_samples() {
                    let y = data.labels()[i];
                    let row = data.row(i);
                    let w = -y * logistic::sigmoid(-y * dot(row, theta)) / n;
                    g.iter_mut().zip(row).for_each(|(g, x)| *g += w * x);
                }
                g
            }
        })
    }

    /// Minimum value `L*`, when known in closed form.
    pub fn optimum_value(&self) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Quadratic { diag, b } => {
                Some(-0.5 * diag.iter().zip(b).map(|(a, b)| b * b / a).sum::<f64>())
            }
            ObjectiveKind::Rosenbrock { .. } => Some(0.0),
            ObjectiveKind::Logistic { .. } => None,
        }
    }

    /// Smoothness constant `L` where it is known exactly.
    pub fn smoothness(&self) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Quadratic { diag, .. } => diag.iter().copied().reduce(f64::max),
            _ => None,
        }
    }

    /// Materialized `ζ_ξ` for `batch` (oracle use only).
    pub fn noise_sample(&self, batch: MinibatchId) -> Vec<f64> {
        let n = self.dim();
        if self.noise == GradientNoise::None {
            return vec![0.0; n];
        }
        let mut stream = self.noise_stream(batch);
        (0..n)
            .map(|j| self.noise.std_at(j) * stream.next_normal())
            .collect()
    }

    /// `∇L(θ) + ζ_ξ`, the exact gradient of `L(·; ξ)`.
    pub fn stochastic_gradient(&self, theta: &[f64], batch: MinibatchId) -> Result<Vec<f64>> {
        let mut g = self.true_gradient(theta)?;
        g.iter_mut()
            .zip(self.noise_sample(batch))
            .for_each(|(g, z)| *g += z);
        Ok(g)
    }

    fn noise_stream(&self, batch: MinibatchId) -> GaussianStream {
        GaussianStream::new(PerturbationSeed(derive_seed(self.noise_seed, batch.0)))
    }

    /// Full evaluation with the overflow flag.
    pub fn evaluate_detailed(
        &self,
        theta: &[f64],
        batch: MinibatchId,
        jitter_seed: u64,
    ) -> Result<Evaluation> {
        let mut value = self.clean_loss(theta)?;
        if self.noise != GradientNoise::None {
            let mut stream = self.noise_stream(batch);
            value += theta
                .iter()
                .enumerate()
                .map(|(j, t)| self.noise.std_at(j) * stream.next_normal() * t)
                .sum::<f64>();
        }
        if self.jitter_std > 0.0 {
            let z = GaussianStream::new(PerturbationSeed(jitter_seed)).next_normal();
            value += self.jitter_std * z;
        }
        let q = quantize(value, self.precision);
        Ok(Evaluation {
            value: q.value,
            overflow: q.overflow,
        })
    }
}

impl Objective for SyntheticObjective {
    fn dim(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Quadratic { diag, .. } => diag.len(),
            ObjectiveKind::Rosenbrock { n } => *n,
            ObjectiveKind::Logistic { data, .. } => data.dim(),
        }
    }

    fn evaluate(&self, theta: &[f64], batch: MinibatchId, jitter_seed: u64) -> Result<f64> {
        Ok(self.evaluate_detailed(theta, batch, jitter_seed)?.value)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(obj: &SyntheticObjective, theta: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|j| {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[j] += h;
                m[j] -= h;
                (obj.clean_loss(&p).unwrap() - obj.clean_loss(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_minimum() {
        let obj = SyntheticObjective::isotropic_quadratic(3).unwrap();
        assert_eq!(obj.evaluate(&[0.0; 3], MinibatchId(0), 0).unwrap(), 0.0);
        assert_eq!(obj.optimum_value(), Some(0.0));
        let obj = SyntheticObjective::quadratic(vec![2.0, 4.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(obj.true_gradient(&[1.0, 1.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            obj.clean_loss(&[0.5, 0.5]).unwrap(),
            obj.optimum_value().unwrap()
        );
        assert_eq!(obj.smoothness(), Some(4.0));
    }

    #[test]
    fn rosenbrock_minimizer() {
        let obj = SyntheticObjective::rosenbrock(2).unwrap();
        assert_eq!(obj.true_gradient(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(obj.clean_loss(&[1.0, 1.0]).unwrap(), 0.0);
        let theta = [-1.2, 1.0, 0.3, 0.8];
        let obj = SyntheticObjective::rosenbrock(4).unwrap();
        let g = obj.true_gradient(&theta).unwrap();
        let fd = central_difference(&obj, &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let data = LogisticData::synthetic(40, 5, 2.0, 3).unwrap();
        let obj = SyntheticObjective::logistic(data.clone(), 0.0).unwrap();
        let g = obj.true_gradient(&[0.0; 5]).unwrap();
        // σ(0) = ½, so ∇L(0) = −½ mean(y·x)
        for (j, gj) in g.iter().enumerate() {
            let expected = -0.5
                * (0..40)
                    .map(|i| data.labels()[i] * data.row(i)[j])
                    .sum::<f64>()
                / 40.0;
            assert!((gj - expected).abs() < 1e-14);
        }
        let fd = central_difference(&obj, &[0.0; 5], 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!((obj.clean_loss(&[0.0; 5]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_gradient_with_l2() {
        let data = LogisticData::synthetic(25, 3, 1.0, 8).unwrap();
        let obj = SyntheticObjective::logistic(data, 0.1).unwrap();
        let theta = [0.3, -0.7, 1.1];
        let g = obj.true_gradient(&theta).unwrap();
        let fd = central_difference(&obj, &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_noise_is_the_gradient_noise() {
        let n = 6;
        let obj = SyntheticObjective::isotropic_quadratic(n)
            .unwrap()
            .with_noise(GradientNoise::Isotropic { variance: 0.5 }, 77)
            .unwrap();
        let theta: Vec<f64> = (0..n).map(|j| j as f64 - 2.0).collect();
        let batch = MinibatchId(4);
        let zeta = obj.noise_sample(batch);
        let expected = obj.clean_loss(&theta).unwrap() + dot(&zeta, &theta);
        let got = obj.evaluate(&theta, batch, 0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(got, obj.evaluate(&theta, batch, 0).unwrap());
        assert_ne!(got, obj.evaluate(&theta, MinibatchId(5), 0).unwrap());
        assert_eq!(obj.noise_trace(), 3.0);
    }

    #[test]
    fn jitter_depends_on_seed_only() {
        let obj = SyntheticObjective::isotropic_quadratic(2)
            .unwrap()
            .with_jitter(0.1)
            .unwrap();
        let a = obj.evaluate(&[1.0, 1.0], MinibatchId(0), 1).unwrap();
        assert_eq!(a, obj.evaluate(&[1.0, 1.0], MinibatchId(0), 1).unwrap());
        assert_ne!(a, obj.evaluate(&[1.0, 1.0], MinibatchId(0), 2).unwrap());
    }

    #[test]
    fn precision_is_applied_to_the_value() {
        // ½·a·θ² with a = 2π, θ = 1 gives π
        let obj = SyntheticObjective::quadratic(vec![2.0 * std::f64::consts::PI], vec![0.0])
            .unwrap()
            .with_precision(Precision::Bf16);
        assert_eq!(obj.evaluate(&[1.0], MinibatchId(0), 0).unwrap(), 3.140625);
        let big = SyntheticObjective::isotropic_quadratic(1)
            .unwrap()
            .with_precision(Precision::Fp16);
        let e = big.evaluate_detailed(&[1000.0], MinibatchId(0), 0).unwrap();
        assert!(e.overflow);
        assert_eq!(e.value, f64::INFINITY);
    }

    #[test]
    fn construction_errors() {
        assert!(SyntheticObjective::quadratic(vec![1.0, -1.0], vec![0.0, 0.0]).is_err());
        assert!(SyntheticObjective::quadratic(vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(SyntheticObjective::rosenbrock(1).is_err());
        assert!(SyntheticObjective::isotropic_quadratic(2)
            .unwrap()
            .with_noise(
                GradientNoise::Diagonal {
                    variances: vec![1.0]
                },
                0
            )
            .is_err());
        let obj = SyntheticObjective::isotropic_quadratic(2).unwrap();
        assert!(obj.evaluate(&[1.0], MinibatchId(0), 0).is_err());
    }
}
