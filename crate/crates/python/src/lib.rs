//! Python bindings for the `bszo` crate.

use bszo::harness::{grid_summary, run_experiment as run_cells, ExperimentConfig};
use bszo::objective::quantize as quantize_value;
use bszo::perturbation::gaussian_vector as gaussian;
use bszo::posterior::{
    batch_posterior as batch, principal_eigenvector as principal, shrinkage_factor as shrinkage,
};
use bszo::{
    Error, GradientNoise, LogisticData, MinibatchId, Objective as _, Observation, PerturbationSeed,
    Precision, SyntheticObjective, Variant,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::NumericalDegeneracy(_) | Error::Evaluation { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => PyIOError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows differ in length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `n` standard normals regenerated from `seed`.
#[pyfunction]
fn gaussian_vector(seed: u64, n: usize) -> PyResult<Vec<f64>> {
    gaussian(PerturbationSeed(seed), n).map_err(to_py)
}

/// `σ_p² / (σ_p² + σ_e²)`.
#[pyfunction]
fn shrinkage_factor(sigma_p2: f64, sigma_e2: f64) -> PyResult<f64> {
    shrinkage(sigma_p2, sigma_e2).map_err(to_py)
}

/// Rounds to `precision` ("fp64", "fp32", "bf16", "fp16"); returns `(value, overflow)`.
#[pyfunction]
fn quantize(value: f64, precision: &str) -> PyResult<(f64, bool)> {
    let p: Precision = precision.parse().map_err(to_py)?;
    let q = quantize_value(value, p);
    Ok((q.value, q.overflow))
}

/// Closed-form posterior for design rows `design`, observations `y` and
/// per-row noise variances `noise`. Returns `(mu, sigma)`.
#[pyfunction]
fn batch_posterior(
    design: Vec<Vec<f64>>,
    y: Vec<f64>,
    sigma_p2: f64,
    noise: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = matrix(&design)?;
    let (mu, sigma) = batch(
        &d,
        &DVector::from_vec(y),
        sigma_p2,
        &DVector::from_vec(noise),
    )
    .map_err(to_py)?;
    Ok((mu.iter().copied().collect(), rows(&sigma)))
}

/// Returns `(vector, eigenvalue, degenerate)`.
#[pyfunction]
fn principal_eigenvector(sigma: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64, bool)> {
    let p = principal(&matrix(&sigma)?).map_err(to_py)?;
    Ok((p.vector.iter().copied().collect(), p.value, p.degenerate))
}

/// Runs every cell of a TOML experiment config and returns the JSON summary
/// (`{"runs": [...], "grid": [...]}`).
#[pyfunction]
fn run_experiment(config_toml: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(to_py)?;
    let records = run_cells(&cfg).map_err(to_py)?;
    let runs: Vec<_> = records.iter().map(|r| &r.summary).collect();
    serde_json::to_string(&serde_json::json!({
        "runs": runs,
        "grid": grid_summary(&records),
    }))
    .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pyclass(name = "PosteriorState", module = "bszo_py")]
#[derive(Clone)]
struct PyPosterior(bszo::PosteriorState);

#[pymethods]
impl PyPosterior {
    #[new]
    #[pyo3(signature = (k, sigma_p2 = 1.0, sigma_e2 = 1.0, alpha = 0.3))]
    fn new(k: usize, sigma_p2: f64, sigma_e2: f64, alpha: f64) -> PyResult<Self> {
        bszo::PosteriorState::new(k, sigma_p2, sigma_e2, alpha)
            .map(PyPosterior)
            .map_err(to_py)
    }

    fn kalman_update(&mut self, d: Vec<f64>, y: f64) -> PyResult<()> {
        self.0.kalman_update(&Observation::new(d, y)).map_err(to_py)
    }

    /// Updates `σ_e²` from the residual of `(d, y)`; returns the normalized residual.
    fn residual_update(&mut self, d: Vec<f64>, y: f64) -> PyResult<f64> {
        self.0
            .residual_update(&Observation::new(d, y))
            .map_err(to_py)
    }

    fn max_uncertainty_axis(&self) -> usize {
        self.0.max_uncertainty_axis()
    }

    fn reset(&mut self) {
        self.0.reset()
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.0.mu().iter().copied().collect()
    }

    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        rows(self.0.sigma())
    }

    #[getter]
    fn sigma_e2(&self) -> f64 {
        self.0.sigma_e2()
    }

    #[getter]
    fn effective_shrinkage(&self) -> f64 {
        self.0.effective_shrinkage()
    }

    fn __repr__(&self) -> String {
        format!(
            "PosteriorState(k={}, sigma_e2={:.4e}, mu={:?})",
            self.0.k(),
            self.0.sigma_e2(),
            self.mu()
        )
    }
}

#[pyclass(name = "Objective", module = "bszo_py")]
#[derive(Clone)]
struct PyObjective(SyntheticObjective);

#[pymethods]
impl PyObjective {
    /// `½ Σ a_j θ_j² − b_j θ_j`.
    #[staticmethod]
    fn quadratic(diag: Vec<f64>, b: Vec<f64>) -> PyResult<Self> {
        SyntheticObjective::quadratic(diag, b)
            .map(PyObjective)
            .map_err(to_py)
    }

    #[staticmethod]
    fn rosenbrock(n: usize) -> PyResult<Self> {
        SyntheticObjective::rosenbrock(n)
            .map(PyObjective)
            .map_err(to_py)
    }

    /// Logistic regression on seeded synthetic data.
    #[staticmethod]
    #[pyo3(signature = (samples, dim, separation = 2.0, seed = 0, l2 = 1e-3))]
    fn logistic(samples: usize, dim: usize, separation: f64, seed: u64, l2: f64) -> PyResult<Self> {
        let data = LogisticData::synthetic(samples, dim, separation, seed).map_err(to_py)?;
        SyntheticObjective::logistic(data, l2)
            .map(PyObjective)
            .map_err(to_py)
    }

    /// Copy with isotropic gradient noise of total variance `trace`.
    fn with_noise(&self, trace: f64, seed: u64) -> PyResult<Self> {
        let n = self.0.dim();
        self.0
            .clone()
            .with_noise(GradientNoise::with_trace(trace, n), seed)
            .map(PyObjective)
            .map_err(to_py)
    }

    fn with_precision(&self, precision: &str) -> PyResult<Self> {
        let p: Precision = precision.parse().map_err(to_py)?;
        Ok(PyObjective(self.0.clone().with_precision(p)))
    }

    fn with_jitter(&self, std: f64) -> PyResult<Self> {
        self.0
            .clone()
            .with_jitter(std)
            .map(PyObjective)
            .map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[pyo3(signature = (theta, batch = 0, jitter_seed = 0))]
    fn evaluate(&self, theta: Vec<f64>, batch: u64, jitter_seed: u64) -> PyResult<f64> {
        self.0
            .evaluate(&theta, MinibatchId(batch), jitter_seed)
            .map_err(to_py)
    }

    fn clean_loss(&self, theta: Vec<f64>) -> PyResult<f64> {
        self.0.clean_loss(&theta).map_err(to_py)
    }

    fn true_gradient(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.true_gradient(&theta).map_err(to_py)
    }

    fn optimum_value(&self) -> Option<f64> {
        self.0.optimum_value()
    }
}

#[pyclass(name = "Optimizer", module = "bszo_py")]
struct PyOptimizer(bszo::Optimizer);

#[pymethods]
impl PyOptimizer {
    /// `variant` is "bszo", "bszo_b" or "mezo"; `m` defaults to `k + 1`.
    #[new]
    #[pyo3(signature = (variant = "bszo", eta = 1e-3, epsilon = 1e-4, k = 2, m = None, sigma_p2 = 1.0, sigma_e2_init = 1.0, alpha = 0.3))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        eta: f64,
        epsilon: f64,
        k: usize,
        m: Option<usize>,
        sigma_p2: f64,
        sigma_e2_init: f64,
        alpha: f64,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(to_py)?;
        let cfg = bszo::OptimizerConfig {
            variant,
            eta,
            epsilon,
            k,
            m: m.unwrap_or(k + 1),
            sigma_p2,
            sigma_e2_init,
            alpha,
            ..bszo::OptimizerConfig::default()
        };
        bszo::Optimizer::new(cfg).map(PyOptimizer).map_err(to_py)
    }

    /// One step from `theta`. Returns `(new_theta, report)` where `report`
    /// is a dict with the step's loss, posterior mean, noise level and
    /// forward-pass count.
    #[pyo3(signature = (objective, theta, step_seed, batch = 0))]
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        objective: &PyObjective,
        mut theta: Vec<f64>,
        step_seed: u64,
        batch: u64,
    ) -> PyResult<(Vec<f64>, Bound<'py, pyo3::types::PyDict>)> {
        let r = self
            .0
            .step(&objective.0, &mut theta, step_seed, MinibatchId(batch))
            .map_err(to_py)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("step", r.step)?;
        d.set_item("loss_f0", r.loss_f0)?;
        d.set_item("mu", r.mu_final)?;
        d.set_item(
            "observations",
            r.observations.iter().map(|o| o.y).collect::<Vec<_>>(),
        )?;
        d.set_item("sigma_e2", r.sigma_e2_final)?;
        d.set_item("gamma_eff", r.gamma_eff)?;
        d.set_item("forward_passes", r.forward_passes)?;
        d.set_item("update_norm", r.update_norm)?;
        Ok((theta, d))
    }

    #[getter]
    fn sigma_e2(&self) -> f64 {
        self.0.sigma_e2()
    }

    #[getter]
    fn steps_taken(&self) -> u64 {
        self.0.steps_taken()
    }

    #[getter]
    fn forward_passes_per_step(&self) -> u32 {
        self.0.config().forward_passes_per_step()
    }
}

#[pymodule]
fn bszo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gaussian_vector, m)?)?;
    m.add_function(wrap_pyfunction!(shrinkage_factor, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(batch_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(principal_eigenvector, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyObjective>()?;
    m.add_class::<PyOptimizer>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let r = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let m = matrix(&r).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (2, 3));
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(rows(&m), r);
    }
}
