use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Cell, ExperimentConfig};
use crate::error::{Error, Result};
use crate::objective::{MinibatchId, SyntheticObjective};
use crate::optimizer::{Optimizer, Variant};
use crate::perturbation::derive_seed;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BSZO_THREADS";

/// A cell is marked diverged once its loss gap exceeds this multiple of the initial gap.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// One CSV row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    /// Training loss seen by the optimizer at the unperturbed point.
    pub loss: f64,
    pub sigma_e2: f64,
    pub gamma_eff: f64,
    pub update_norm: f64,
    /// Cumulative.
    pub fwd_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub eta: f64,
    pub replicate: u32,
    pub steps: u64,
    pub forward_passes: u64,
    /// Clean (noise-free, full-precision) losses.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_to_threshold: Option<u64>,
    pub passes_to_threshold: Option<u64>,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
    pub early_stopped: bool,
    pub final_sigma_e2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
}

/// Worker pool honouring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))
        })?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

/// Seeds shared by every cell of one replicate, so variants and learning rates
/// see the same initial point, minibatches and directions.
fn replicate_seed(cfg: &ExperimentConfig, replicate: u32) -> u64 {
    derive_seed(cfg.run_seed, replicate as u64)
}

/// Loss gap `L − L*` when the optimum is known, else the loss itself.
fn gap(obj: &SyntheticObjective, loss: f64) -> f64 {
    loss - obj.optimum_value().unwrap_or(0.0)
}

/// Runs one grid cell to completion. Divergence ends the cell, never the call;
/// only configuration problems are returned as errors.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<RunRecord> {
    let obj = cfg.objective.build(cfg.run_seed)?;
    let rep = replicate_seed(cfg, cell.replicate);
    let mut theta = cfg.objective.initial_point(rep);
    let mut opt = Optimizer::new(cell.optimizer.clone())?;
    let per_step = cell.optimizer.forward_passes_per_step() as u64;

    let initial_loss = obj.clean_loss(&theta)?;
    let initial_gap = gap(&obj, initial_loss).abs().max(f64::MIN_POSITIVE);
    let mut rows = Vec::new();
    let mut passes = 0u64;
    let mut last_loss = initial_loss;
    let mut best_loss = initial_loss;
    let mut best_val = initial_loss;
    let mut stale = 0u32;
    let mut early_stopped = false;
    let mut divergence_reason = None;
    let mut steps_to_threshold = None;
    let mut passes_to_threshold = None;

    if let Some(th) = cfg.loss_threshold {
        if gap(&obj, initial_loss) <= th {
            steps_to_threshold = Some(0);
            passes_to_threshold = Some(0);
        }
    }

    for step in 0..cfg.max_steps {
        if steps_to_threshold.is_some() && cfg.stop_at_threshold {
            break;
        }
        if let Some(budget) = cfg.budget_passes {
            if passes + per_step > budget {
                break;
            }
        }
        let step_seed = derive_seed(rep, step + 1);
        let report = match opt.step(&obj, &mut theta, step_seed, MinibatchId(step)) {
            Ok(r) => r,
            Err(e @ (Error::Evaluation { .. } | Error::NumericalDegeneracy(_))) => {
                divergence_reason = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        passes += report.forward_passes as u64;
        rows.push(StepRow {
            step: step + 1,
            loss: report.loss_f0,
            sigma_e2: report.sigma_e2_final,
            gamma_eff: report.gamma_eff,
            update_norm: report.update_norm,
            fwd_passes: passes,
        });

        let loss = obj.clean_loss(&theta)?;
        last_loss = loss;
        if !loss.is_finite() || gap(&obj, loss) > DIVERGENCE_FACTOR * initial_gap {
            divergence_reason = Some(format!("loss {loss:e} after {} steps", step + 1));
            break;
        }
        best_loss = best_loss.min(loss);
        if let Some(th) = cfg.loss_threshold {
            if steps_to_threshold.is_none() && gap(&obj, loss) <= th {
                steps_to_threshold = Some(step + 1);
                passes_to_threshold = Some(passes);
            }
        }
        if cfg.early_stop_patience > 0 && (step + 1) % cfg.eval_every == 0 {
            if loss < best_val {
                best_val = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    let diverged = divergence_reason.is_some();
    Ok(RunRecord {
        label: cell.label(),
        summary: RunSummary {
            variant: cell.variant,
            eta: cell.eta,
            replicate: cell.replicate,
            steps: rows.len() as u64,
            forward_passes: passes,
            initial_loss,
            final_loss: last_loss,
            best_loss,
            steps_to_threshold,
            passes_to_threshold,
            diverged,
            divergence_reason,
            early_stopped,
            final_sigma_e2: opt.sigma_e2(),
        },
        rows,
    })
}

/// Runs every cell (in parallel) and, if `cfg.output` is set, writes one CSV
/// per cell plus `<name>_summary.json`. Records come back in [`ExperimentConfig::cells`] order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let records = thread_pool()?.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cfg, cell))
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(dir) = &cfg.output {
        write_outputs(cfg, &records, dir)?;
    }
    Ok(records)
}

pub fn write_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &record.rows {
        w.serialize(row)?;
    }
    // an empty run still gets a header
    if record.rows.is_empty() {
        w.write_record([
            "step",
            "loss",
            "sigma_e2",
            "gamma_eff",
            "update_norm",
            "fwd_passes",
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a ExperimentConfig,
    runs: Vec<&'a RunSummary>,
    grid: Vec<GridEntry>,
}

pub fn write_outputs(cfg: &ExperimentConfig, records: &[RunRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in records {
        write_csv(r, &dir.join(format!("{}_{}.csv", cfg.name, r.label)))?;
    }
    let summary = SummaryFile {
        config: cfg,
        runs: records.iter().map(|r| &r.summary).collect(),
        grid: grid_summary(records),
    };
    let file = std::fs::File::create(dir.join(format!("{}_summary.json", cfg.name)))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    Ok(())
}

/// Aggregate over replicates for one `(variant, η)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub variant: Variant,
    pub eta: f64,
    pub replicates: u32,
    /// Mean final clean loss; `inf` when any replicate diverged.
    pub mean_final_loss: f64,
    pub diverged: u32,
    pub mean_steps_to_threshold: Option<f64>,
}

/// Per-`(variant, η)` aggregates, in grid order.
pub fn grid_summary(records: &[RunRecord]) -> Vec<GridEntry> {
    let mut out: Vec<GridEntry> = Vec::new();
    let mut sums: Vec<(f64, Vec<u64>)> = Vec::new();
    for r in records {
        let s = &r.summary;
        let pos = out
            .iter()
            .position(|g| g.variant == s.variant && g.eta == s.eta)
            .unwrap_or_else(|| {
                out.push(GridEntry {
                    variant: s.variant,
                    eta: s.eta,
                    replicates: 0,
                    mean_final_loss: 0.0,
                    diverged: 0,
                    mean_steps_to_threshold: None,
                });
                sums.push((0.0, Vec::new()));
                out.len() - 1
            });
        let g = &mut out[pos];
        g.replicates += 1;
        if s.diverged {
            g.diverged += 1;
        }
        sums[pos].0 += if s.diverged {
            f64::INFINITY
        } else {
            s.final_loss
        };
        if let Some(t) = s.steps_to_threshold {
            sums[pos].1.push(t);
        }
    }
    for (g, (total, hits)) in out.iter_mut().zip(sums) {
        g.mean_final_loss = total / g.replicates as f64;
        if hits.len() == g.replicates as usize {
            g.mean_steps_to_threshold = Some(hits.iter().sum::<u64>() as f64 / hits.len() as f64);
        }
    }
    out
}

/// The η with the lowest mean final loss for each variant, or `None` when every
/// η of that variant had a diverged replicate.
pub fn best_per_variant(grid: &[GridEntry]) -> Vec<(Variant, Option<GridEntry>)> {
    let mut variants: Vec<Variant> = grid.iter().map(|g| g.variant).collect();
    variants.dedup();
    variants
        .into_iter()
        .map(|v| {
            let best = grid
                .iter()
                .filter(|g| g.variant == v && g.mean_final_loss.is_finite())
                .min_by(|a, b| a.mean_final_loss.total_cmp(&b.mean_final_loss))
                .cloned();
            (v, best)
        })
        .collect()
}
