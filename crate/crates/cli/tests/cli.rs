use std::path::Path;
use std::process::Command;

use eqrecal::attack::AttackConfig;
use eqrecal::experiment::{ExperimentConfig, TOY_EPSILON};

fn eqrecal(args: &[&str], out: &Path, config: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eqrecal"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::toy_segmentation(0);
    cfg.train_data.size = 16;
    cfg.train.epochs = 1;
    cfg.eval_data.size = 2;
    cfg.attacks = vec![AttackConfig::pgd(TOY_EPSILON, 2, 0)];
    for d in &mut cfg.defenses {
        d.steps = 2;
    }
    if let Some(det) = cfg.detector.as_mut() {
        det.calibration_size = 3;
    }
    cfg.reseed(0);
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn eval_writes_reports_ledger_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    eqrecal(&["eval"], &out, &cfg);
    for f in ["report.csv", "report.json", "ledger.jsonl", "config.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("model-") && n.ends_with(".eqck")));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("config_hash,checkpoint_hash,section,"));
    assert!(csv.contains(",main,pgd,"));

    let printed = eqrecal(&["report", "--from", out.to_str().unwrap()], &out, &cfg);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("main"));
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), csv);
}

#[test]
fn stage_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    eqrecal(&["train"], &out, &cfg);
    eqrecal(&["attack"], &out, &cfg);
    eqrecal(&["defend", "--set", "pgd"], &out, &cfg);
    assert!(out.join("defended/pgd-equivariance.eqck").exists());
    eqrecal(&["detect"], &out, &cfg);
    assert!(out.join("calibration.json").exists());
    eqrecal(&["sweep-epsv", "--values", "0,4"], &out, &cfg);
    assert!(out.join("tradeoff.svg").exists());
    eqrecal(&["sweep-constraints", "--fractions", "0.1,1"], &out, &cfg);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains(",num_constraints,"));
    eqrecal(&["ablate-transforms"], &out, &cfg);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains("equivariance[flip]"));
}

#[test]
fn unknown_set_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let status = Command::new(env!("CARGO_BIN_EXE_eqrecal"))
        .args(["defend", "--set", "nope", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("unknown set"));
}
