//! Zeroth-order optimization with Bayesian aggregation of finite differences.
//!
//! Each optimizer step draws `k` Gaussian directions (stored only as seeds),
//! measures one-sided loss differences along them, and folds the measurements
//! into a Gaussian posterior over the projected gradient with rank-1 Kalman
//! updates. The posterior mean then drives the parameter update. The observation
//! noise variance is tracked with an exponential moving average of prediction
//! residuals, which shrinks the step when the loss oracle is noisy (for example
//! under bf16 rounding).
//!
//! Modules:
//!
//! * [`perturbation`]: seed-addressed Gaussian streams and in-place perturbation.
//! * [`posterior`]: Kalman / batch Bayesian regression over the subspace gradient.
//! * [`optimizer`]: BSZO, its uncached basic variant BSZO-B, and a MeZO baseline.
//! * [`objective`]: synthetic loss oracles with gradient noise and precision emulation.
//! * [`harness`]: experiment runner, grid search and verification suites.

pub mod error;
pub mod harness;
pub mod objective;
pub mod optimizer;
pub mod perturbation;
pub mod posterior;

pub use error::{Error, Result};
pub use objective::{
    GradientNoise, LogisticData, MinibatchId, Objective, ObjectiveKind, Precision,
    SyntheticObjective,
};
pub use optimizer::{Optimizer, OptimizerConfig, StepReport, Variant};
pub use perturbation::{Basis, DenseBasis, PerturbationSeed, SubspaceBasis};
pub use posterior::{Observation, PosteriorState};
