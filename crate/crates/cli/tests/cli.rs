use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disparse_core::config::{ArchConfig, ExperimentConfig};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_disparse"));
    c.env_remove("DISPARSE_OUT");
    c
}

/// Writes a config small enough to train in well under a second.
fn small_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.suite.n_train = 256;
    c.suite.n_val = 64;
    c.suite.input_dim = 16;
    c.arch = ArchConfig {
        trunk_widths: vec![16, 16],
        head_hidden: 16,
        ..ArchConfig::default()
    };
    c.train.iterations = 40;
    c.train.finetune_iterations = 10;
    c.train.log_every = 10;
    c.saliency.batches = 2;
    c.schedule.update_interval = 10;
    let path = dir.join("small.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn record(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("record.json")).unwrap()).unwrap()
}

fn records_under(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "record.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

#[test]
fn static_run_writes_a_record_at_the_target() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    run_ok(bin().args(["train-static", "--sparsity", "0.9", "--arbiter", "or", "--seed", "1"])
        .arg("--config").arg(&cfg).arg("--out").arg(&out));
    let dir = out.join("static-disparse-or-s0.9").join("seed-1");
    let r = record(&dir);
    assert!(r["achieved_sparsity"].as_f64().unwrap() >= 0.9 - 1e-12);
    for f in ["config.toml", "masks.json", "checkpoint.json", "loss_curve.tsv", "iou.tsv", "timing.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    // the written config reproduces the effective one
    let written = ExperimentConfig::load(&dir.join("config.toml")).unwrap();
    assert_eq!(written.sparsity, 0.9);
    assert_eq!(written.seeds, vec![1]);
    assert_eq!(written.train.iterations, 40);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("env-out");
    run_ok(bin().env("DISPARSE_OUT", &out).args(["train-dense", "--seed", "3"]).arg("--config").arg(&cfg));
    assert!(out.join("dense").join("seed-3").join("record.json").exists());
}

#[test]
fn identical_mask_files_overlap_completely() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    run_ok(bin().args(["train-static", "--sparsity", "0.7", "--seed", "2"])
        .arg("--config").arg(&cfg).arg("--out").arg(&out));
    let masks = out.join("static-disparse-or-s0.7").join("seed-2").join("masks.json");
    let copy = tmp.path().join("copy.json");
    fs::copy(&masks, &copy).unwrap();
    let table = tmp.path().join("iou.tsv");
    run_ok(bin().arg("analyze-masks").arg(&masks).arg(&copy).arg("--out").arg(&table));
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let iou: f64 = row.split('\t').nth(1).unwrap().parse().unwrap();
        assert_eq!(iou, 1.0, "{row}");
    }

    // a single file compares its tasks
    let single = run_ok(bin().arg("analyze-masks").arg(&masks).arg("--detail"));
    assert!(String::from_utf8_lossy(&single.stdout).contains("# density"));
}

#[test]
fn sweep_isolates_each_level_and_report_aggregates_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("sweep");
    run_ok(bin().args(["sweep", "--sparsity", "0.3,0.5,0.7,0.9", "--methods", "disparse,random",
        "--seed", "1", "--seed", "2", "--jobs", "3"])
        .arg("--config").arg(&cfg).arg("--out").arg(&out));
    let found = records_under(&out);
    assert_eq!(found.len(), 4 * 2 * 2);
    let mut levels: Vec<f64> = found.iter()
        .map(|p| record(p.parent().unwrap())["config"]["sparsity"].as_f64().unwrap())
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    assert_eq!(levels, vec![0.3, 0.5, 0.7, 0.9]);

    let report = run_ok(bin().arg("report").arg(&out));
    let text = String::from_utf8(report.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 8);
    // one row per configuration, methods in a stable order, both seeds pooled
    assert!(rows[..4].iter().all(|r| r[0] == "disparse"));
    assert!(rows[4..].iter().all(|r| r[0] == "random"));
    for r in &rows {
        assert_eq!(r[4], "1,2");
        let sd: f64 = r[7].parse().unwrap();
        assert!(sd >= 0.0);
    }
    let again = run_ok(bin().arg("report").arg(&out));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    // a single run directory is a one-row table with zero spread
    let one = found[0].parent().unwrap();
    let single = run_ok(bin().arg("report").arg(one));
    let text = String::from_utf8(single.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[7].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn prune_uses_a_dense_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    run_ok(bin().args(["train-dense", "--seed", "1"]).arg("--config").arg(&cfg).arg("--out").arg(&out));
    let ck = out.join("dense").join("seed-1").join("checkpoint.json");
    run_ok(bin().args(["prune", "--sparsity", "0.5", "--seed", "1"])
        .arg("--checkpoint").arg(&ck).arg("--config").arg(&cfg).arg("--out").arg(&out));
    let r = record(&out.join("pretrained-disparse-or-s0.5").join("seed-1"));
    assert!(r["achieved_sparsity"].as_f64().unwrap() >= 0.5 - 1e-12);
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let code = |cmd: &mut Command| cmd.output().unwrap().status.code();

    assert_eq!(code(bin().arg("no-such-command")), Some(1));
    assert_eq!(code(bin().args(["train-static", "--sparsity", "1.5"]).arg("--out").arg(tmp.path())), Some(1));
    assert_eq!(code(bin().args(["train-static", "--sparsity", "0.5", "--method", "bogus"])), Some(1));
    assert_eq!(code(bin().args(["prune", "--sparsity", "0.5"]).arg("--config").arg(&cfg)), Some(1));
    assert_eq!(
        code(bin().args(["prune", "--sparsity", "0.5", "--checkpoint"]).arg(tmp.path().join("missing.json"))
            .arg("--config").arg(&cfg).arg("--out").arg(tmp.path())),
        Some(2)
    );
    assert_eq!(code(bin().arg("--help")), Some(0));
}
