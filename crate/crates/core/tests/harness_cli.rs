use std::fs;
use std::path::Path;
use std::process::Command;

use bszo::harness::{run_experiment, ExperimentConfig};

const BIN: &str = env!("CARGO_BIN_EXE_bszo-bench");

const SMALL: &str = r#"
name = "small"
run_seed = 3
replicates = 2
max_steps = 40
eval_every = 10

[objective]
kind = "quadratic"
dim = 20
spectrum = [0.5, 2.0]
b_scale = 0.5
noise_trace = 1e-3

[optimizer]
variants = ["bszo", "bszo_b", "mezo"]
eta = [1e-3, 1e-2]
k = 2
"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_config_writes_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        cfg.output = Some(dir.path().to_path_buf());
        run_experiment(&cfg).unwrap();
    }
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert_eq!(fa.len(), 12);
    assert_eq!(fa, fb);

    let (_, first) = &fa[0];
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,sigma_e2,gamma_eff,update_norm,fwd_passes"
    );
    let mut last_passes = 0u64;
    let mut last_step = None;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let step: u64 = cols[0].parse().unwrap();
        let passes: u64 = cols[5].parse().unwrap();
        let gamma: f64 = cols[3].parse().unwrap();
        assert!(last_step.is_none_or(|s| step > s));
        assert!(passes > last_passes);
        assert!(gamma > 0.0 && gamma < 1.0);
        last_step = Some(step);
        last_passes = passes;
    }
}

#[test]
fn gamma_eff_is_the_shrinkage_factor_under_coordinate_sampling() {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.replicates = 1;
    cfg.optimizer.variants = vec![bszo::Variant::Bszo];
    cfg.optimizer.eta = vec![1e-3];
    cfg.optimizer.m = Some(cfg.optimizer.k);
    cfg.optimizer.alpha = 0.0;
    cfg.optimizer.sigma_p2 = 2.0;
    cfg.optimizer.sigma_e2_init = 0.5;
    let records = run_experiment(&cfg).unwrap();
    let gamma = 2.0 / 2.5;
    for row in &records[0].rows {
        assert!((row.gamma_eff - gamma).abs() < 1e-12, "{}", row.gamma_eff);
    }
}

#[test]
fn cli_run_and_grid_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");
    for cmd in ["run", "grid"] {
        let status = Command::new(BIN)
            .args([
                cmd,
                config.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
            ])
            .env("BSZO_THREADS", "1")
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        let stdout = String::from_utf8_lossy(&status.stdout);
        assert!(stdout.contains("bszo_eta1e-3_rep0"));
        if cmd == "grid" {
            assert!(stdout.contains("best mezo"));
        }
    }
    assert_eq!(csv_files(&out).len(), 12);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("small_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 12);
}

#[test]
fn cli_exit_codes() {
    let ok = Command::new(BIN)
        .args(["verify", "posterior"])
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));

    // a step cap that cannot reach the threshold fails the rate suite
    let fail = Command::new(BIN)
        .args(["verify", "rate", "--k", "1,2", "--max-steps", "5"])
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL rate/rate_k1_vs_k2"));

    let missing = Command::new(BIN)
        .args(["run", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "max_steps = 0\n").unwrap();
    let invalid = Command::new(BIN)
        .args(["grid", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("max_steps"));
}
