use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::perturbation::{derive_seed, GaussianStream, PerturbationSeed};

/// Binary classification data for the logistic objective.
///
/// Features are stored row-major (`n_samples × dim`); labels are `±1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticData {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl LogisticData {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(invalid(
                "logistic data needs at least one sample and one feature",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(invalid(format!(
                "{} feature values do not fill {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(invalid("labels must be +1 or -1"));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        Ok(LogisticData {
            features,
            labels,
            dim,
        })
    }

    /// Balanced two-class Gaussian data: even rows are `+1`, odd rows `-1`,
    /// `x = y·m + N(0, I)` with a seeded class-mean `m` of norm `separation`.
    pub fn synthetic(n_samples: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if n_samples == 0 || dim == 0 {
            return Err(invalid("synthetic logistic data needs n_samples, dim >= 1"));
        }
        let mut mean = vec![0.0; dim];
        GaussianStream::new(PerturbationSeed(derive_seed(seed, 0))).fill(&mut mean);
        let norm = mean
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        mean.iter_mut().for_each(|x| *x *= separation / norm);

        let mut noise = GaussianStream::new(PerturbationSeed(derive_seed(seed, 1)));
        let mut features = Vec::with_capacity(n_samples * dim);
        let mut labels = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            labels.push(y);
            features.extend(mean.iter().map(|m| y * m + noise.next_normal()));
        }
        Self::new(features, labels, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `label,x0,…,x{d-1}` rows with a header line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let dim = r.headers()?.len().saturating_sub(1);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut vals = rec.iter().map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad number '{s}' in logistic csv: {e}")))
            });
            labels.push(
                vals.next()
                    .ok_or_else(|| Error::Config("empty csv row".into()))??,
            );
            for v in vals {
                features.push(v?);
            }
        }
        Self::new(features, labels, dim)
    }
}

#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
