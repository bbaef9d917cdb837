use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bszo::harness::verify::{self, FloorSetup, PrecisionSetup, RateSetup, VerifyReport};
use bszo::harness::{best_per_variant, grid_summary, run_experiment, ExperimentConfig, RunRecord};

/// Zeroth-order optimizer experiments and verification suites.
///
/// Set BSZO_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "bszo-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, η, replicate) cell of a TOML config.
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Like `run`, then report the best η per variant.
    Grid {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run verification suites; exits non-zero if any check fails.
    Verify {
        #[arg(required = true)]
        suites: Vec<Suite>,
        /// Overrides each suite's default seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo trials for the unbiasedness suite.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Dimension for the unbiasedness suite.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Subspace dimensions (unbiasedness and rate suites).
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Loss threshold for the rate suite.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        /// Step cap per cell for the rate suite.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Write the full reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Posterior,
    Unbiasedness,
    Rate,
    Precision,
    All,
}

fn load(config: &PathBuf, output: Option<PathBuf>) -> bszo::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if output.is_some() {
        cfg.output = output;
    }
    if cfg.output.is_none() {
        cfg.output = Some(PathBuf::from("results"));
    }
    Ok(cfg)
}

fn print_runs(records: &[RunRecord]) {
    println!(
        "{:<32} {:>8} {:>10} {:>12} {:>12} {:>9}",
        "cell", "steps", "passes", "final_loss", "best_loss", "diverged"
    );
    for r in records {
        let s = &r.summary;
        println!(
            "{:<32} {:>8} {:>10} {:>12.4e} {:>12.4e} {:>9}",
            r.label, s.steps, s.forward_passes, s.final_loss, s.best_loss, s.diverged
        );
    }
}

fn print_report(report: &VerifyReport) {
    for c in &report.checks {
        println!(
            "{} {}/{}{}: {:.4e} (limit {:.4e}) {}",
            if c.passed { "PASS" } else { "FAIL" },
            report.suite,
            c.name,
            if c.gating { "" } else { " [info]" },
            c.value,
            c.limit,
            c.detail
        );
    }
}

struct VerifyArgs {
    seed: Option<u64>,
    trials: usize,
    n: usize,
    k: Option<Vec<usize>>,
    threshold: f64,
    max_steps: Option<u64>,
}

fn run_suite(suite: Suite, a: &VerifyArgs) -> bszo::Result<Vec<VerifyReport>> {
    let seed = a.seed;
    Ok(match suite {
        Suite::Posterior => vec![verify::verify_posterior(seed.unwrap_or(1))?],
        Suite::Unbiasedness => {
            let ks = a.k.clone().unwrap_or_else(|| vec![1, 2, 4]);
            vec![verify::verify_unbiasedness(
                a.n,
                &ks,
                a.trials,
                seed.unwrap_or(1),
            )?]
        }
        Suite::Rate => {
            let mut rate = RateSetup {
                threshold: a.threshold,
                ..RateSetup::default()
            };
            if let Some(cap) = a.max_steps {
                rate.max_steps = cap;
            }
            let mut floor = FloorSetup::default();
            if let Some(seed) = seed {
                rate.seed = seed;
                floor.seed = seed;
            }
            if let Some(ks) = &a.k {
                rate.ks = ks.clone();
            }
            vec![verify::verify_rate(&rate, &floor)?]
        }
        Suite::Precision => {
            let mut setup = PrecisionSetup::default();
            if let Some(seed) = seed {
                setup.seed = seed;
            }
            vec![verify::verify_precision_robustness(&setup)?]
        }
        Suite::All => {
            let mut all = Vec::new();
            for s in [
                Suite::Posterior,
                Suite::Unbiasedness,
                Suite::Rate,
                Suite::Precision,
            ] {
                all.extend(run_suite(s, a)?);
            }
            all
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output } => load(&config, output)
            .and_then(|cfg| run_experiment(&cfg))
            .map(|records| {
                print_runs(&records);
                true
            }),
        Command::Grid { config, output } => load(&config, output)
            .and_then(|cfg| run_experiment(&cfg))
            .map(|records| {
                print_runs(&records);
                println!();
                for (variant, best) in best_per_variant(&grid_summary(&records)) {
                    match best {
                        Some(g) => println!(
                            "best {variant}: eta={:e} mean_final_loss={:.4e} diverged={}/{}",
                            g.eta, g.mean_final_loss, g.diverged, g.replicates
                        ),
                        None => println!("best {variant}: every eta diverged"),
                    }
                }
                true
            }),
        Command::Verify {
            suites,
            seed,
            trials,
            n,
            k,
            threshold,
            max_steps,
            json,
        } => (|| {
            let args = VerifyArgs {
                seed,
                trials,
                n,
                k,
                threshold,
                max_steps,
            };
            let mut reports = Vec::new();
            for s in suites {
                for r in run_suite(s, &args)? {
                    print_report(&r);
                    reports.push(r);
                }
            }
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(reports.iter().all(VerifyReport::passed))
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
