use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{GradientNoise, LogisticData, Precision, SyntheticObjective};
use crate::optimizer::{OptimizerConfig, Variant};
use crate::perturbation::{derive_seed, GaussianStream, PerturbationSeed, DEFAULT_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveName {
    Quadratic,
    Rosenbrock,
    Logistic,
}

/// Which synthetic loss to build and how to initialize θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveName,
    pub dim: usize,
    /// Quadratic Hessian eigenvalues, spaced linearly over `[lo, hi]`.
    pub spectrum: [f64; 2],
    /// Quadratic linear term `b = b_scale · N(0, I)`.
    pub b_scale: f64,
    /// Total gradient-noise variance `tr(Σ)`, spread isotropically.
    pub noise_trace: f64,
    pub precision: Precision,
    pub jitter_std: f64,
    /// `θ₀ = init_offset + init_scale · N(0, I)`.
    pub init_scale: f64,
    pub init_offset: f64,
    pub samples: usize,
    pub separation: f64,
    pub l2: f64,
    /// Load logistic data from CSV instead of generating it.
    pub data_csv: Option<PathBuf>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            kind: ObjectiveName::Quadratic,
            dim: 100,
            spectrum: [1.0, 1.0],
            b_scale: 0.0,
            noise_trace: 0.0,
            precision: Precision::Fp64,
            jitter_std: 0.0,
            init_scale: 1.0,
            init_offset: 0.0,
            samples: 200,
            separation: 2.0,
            l2: 1e-3,
            data_csv: None,
        }
    }
}

impl ObjectiveSpec {
    /// Builds the objective. All randomness is keyed by `seed`.
    pub fn build(&self, seed: u64) -> Result<SyntheticObjective> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::Config("objective.dim must be at least 1".into()));
        }
        let obj = match self.kind {
            ObjectiveName::Quadratic => {
                let [lo, hi] = self.spectrum;
                let diag = (0..n)
                    .map(|j| {
                        if n == 1 {
                            hi
                        } else {
                            lo + (hi - lo) * j as f64 / (n - 1) as f64
                        }
                    })
                    .collect();
                let mut b = vec![0.0; n];
                if self.b_scale != 0.0 {
                    GaussianStream::new(PerturbationSeed(derive_seed(seed, 11))).fill(&mut b);
                    b.iter_mut().for_each(|x| *x *= self.b_scale);
                }
                SyntheticObjective::quadratic(diag, b)?
            }
            ObjectiveName::Rosenbrock => SyntheticObjective::rosenbrock(n)?,
            ObjectiveName::Logistic => {
                let data = match &self.data_csv {
                    Some(path) => LogisticData::read_csv(path)?,
                    None => LogisticData::synthetic(
                        self.samples,
                        n,
                        self.separation,
                        derive_seed(seed, 12),
                    )?,
                };
                if data.dim() != n {
                    return Err(Error::Config(format!(
                        "logistic data has {} features, objective.dim is {n}",
                        data.dim()
                    )));
                }
                SyntheticObjective::logistic(data, self.l2)?
            }
        };
        obj.with_noise(
            GradientNoise::with_trace(self.noise_trace, n),
            derive_seed(seed, 13),
        )?
        .with_precision(self.precision)
        .with_jitter(self.jitter_std)
    }

    pub fn initial_point(&self, seed: u64) -> Vec<f64> {
        let mut theta = vec![0.0; self.dim];
        if self.init_scale != 0.0 {
            GaussianStream::new(PerturbationSeed(derive_seed(seed, 14))).fill(&mut theta);
        }
        theta
            .iter_mut()
            .for_each(|t| *t = self.init_offset + self.init_scale * *t);
        theta
    }
}

/// Optimizer settings; `variants × eta` spans the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerGrid {
    pub variants: Vec<Variant>,
    pub eta: Vec<f64>,
    pub epsilon: f64,
    pub k: usize,
    /// Defaults to `k + 1`.
    pub m: Option<usize>,
    pub sigma_p2: f64,
    pub sigma_e2_init: f64,
    pub alpha: f64,
    pub chunk: usize,
}

impl Default for OptimizerGrid {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerGrid {
            variants: vec![Variant::Bszo],
            eta: vec![d.eta],
            epsilon: d.epsilon,
            k: d.k,
            m: None,
            sigma_p2: d.sigma_p2,
            sigma_e2_init: d.sigma_e2_init,
            alpha: d.alpha,
            chunk: DEFAULT_CHUNK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub run_seed: u64,
    pub replicates: u32,
    /// Step cap `T`.
    pub max_steps: u64,
    /// Optional forward-pass budget; a cell stops once it is reached.
    pub budget_passes: Option<u64>,
    pub eval_every: u64,
    pub early_stop_patience: u32,
    /// Clean-loss threshold for steps-to-threshold.
    pub loss_threshold: Option<f64>,
    pub stop_at_threshold: bool,
    /// Directory for per-cell CSVs and the JSON summary.
    pub output: Option<PathBuf>,
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            run_seed: 0,
            replicates: 1,
            max_steps: 1000,
            budget_passes: None,
            eval_every: 500,
            early_stop_patience: 0,
            loss_threshold: None,
            stop_at_threshold: false,
            output: None,
            objective: ObjectiveSpec::default(),
            optimizer: OptimizerGrid::default(),
        }
    }
}

/// One `(variant, η, replicate)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub eta: f64,
    pub replicate: u32,
    pub optimizer: OptimizerConfig,
}

impl Cell {
    /// File stem used for this cell's CSV.
    pub fn label(&self) -> String {
        format!("{}_eta{:e}_rep{}", self.variant, self.eta, self.replicate)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative data paths resolve against the config file
        if let (Some(csv), Some(dir)) = (&cfg.objective.data_csv, path.as_ref().parent()) {
            if csv.is_relative() {
                cfg.objective.data_csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.optimizer.variants.is_empty() || self.optimizer.eta.is_empty() {
            return Err(Error::Config("optimizer grid must not be empty".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        for cell in self.cells() {
            cell.optimizer.validate()?;
        }
        Ok(())
    }

    pub fn optimizer_config(&self, variant: Variant, eta: f64) -> OptimizerConfig {
        let g = &self.optimizer;
        OptimizerConfig {
            variant,
            eta,
            epsilon: g.epsilon,
            k: g.k,
            m: g.m.unwrap_or(g.k + 1),
            sigma_p2: g.sigma_p2,
            sigma_e2_init: g.sigma_e2_init,
            alpha: g.alpha,
            max_steps: self.max_steps,
            early_stop_patience: self.early_stop_patience,
            eval_every: self.eval_every,
            chunk: g.chunk,
        }
    }

    /// Grid cells in a fixed order: variant, then η, then replicate.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &variant in &self.optimizer.variants {
            for &eta in &self.optimizer.eta {
                for replicate in 0..self.replicates {
                    out.push(Cell {
                        variant,
                        eta,
                        replicate,
                        optimizer: self.optimizer_config(variant, eta),
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            name = "bf16"
            run_seed = 7
            replicates = 2
            max_steps = 50
            budget_passes = 120

            [objective]
            kind = "quadratic"
            dim = 16
            spectrum = [0.5, 1.0]
            precision = "bf16"
            jitter_std = 1e-3

            [optimizer]
            variants = ["bszo", "bszo_b", "mezo"]
            eta = [1e-3, 1e-2]
            k = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.cells().len(), 12);
        assert_eq!(cfg.cells()[0].optimizer.m, 3);
        assert_eq!(cfg.objective.precision, Precision::Bf16);
        let obj = cfg.objective.build(cfg.run_seed).unwrap();
        assert_eq!(obj.smoothness(), Some(1.0));
    }

    #[test]
    fn rejects_unknown_keys_and_empty_grids() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[optimizer]\neta = []").is_err());
        assert!(ExperimentConfig::from_toml_str("max_steps = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[optimizer]\nk = 3\nm = 2").is_err());
    }
}
