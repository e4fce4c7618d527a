//! Comparison tables over run records: one row per method, paradigm, arbiter
//! and sparsity, aggregated over seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::Method;
use crate::error::{Error, Result};
use crate::harness::record::RunRecord;

/// Config keys that may differ between runs of one report.
const VARYING: &[&str] = &[
    "method",
    "paradigm",
    "sparsity",
    "seeds",
    "checkpoint",
    "output_dir",
    "scope",
    "arbiter.",
    "calibration.",
];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.to_string());
        }
    }
}

fn may_vary(key: &str) -> bool {
    VARYING
        .iter()
        .any(|p| if p.ends_with('.') { key.starts_with(p) } else { key == *p })
}

/// Record files under each path: the file itself, or every `record.json`
/// below a directory, sorted.
pub fn find_records(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                if !p.to_string_lossy().ends_with(".partial") {
                    walk(&p, out)?;
                }
            } else if p.file_name().is_some_and(|n| n == "record.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Rejects records whose configs differ outside the keys a report compares.
pub fn check_compatible(records: &[RunRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Config("report needs at least one run record".into()));
    };
    let flat = |r: &RunRecord| {
        let mut m = BTreeMap::new();
        flatten("", &serde_json::to_value(&r.config).expect("config serializes"), &mut m);
        m
    };
    let base = flat(first);
    for r in &records[1..] {
        let other = flat(r);
        let mut diffs = Vec::new();
        for key in base.keys().chain(other.keys().filter(|k| !base.contains_key(*k))) {
            if may_vary(key) {
                continue;
            }
            let (a, b) = (base.get(key), other.get(key));
            if a != b {
                diffs.push(format!(
                    "{key}: {} vs {}",
                    a.map_or("<unset>", String::as_str),
                    b.map_or("<unset>", String::as_str)
                ));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Incompatible(format!(
                "seed {} differs from seed {}: {}",
                r.seed,
                first.seed,
                diffs.join("; ")
            )));
        }
    }
    Ok(())
}

fn arbiter_label(r: &RunRecord) -> String {
    if r.config.method != Method::Disparse {
        return "-".to_string();
    }
    let a = r.config.arbiter;
    match a.rule {
        crate::arbiter::ArbiterRule::Or => "or".to_string(),
        crate::arbiter::ArbiterRule::Majority if a.tie_keep => "majority".to_string(),
        crate::arbiter::ArbiterRule::Majority => "majority-drop-ties".to_string(),
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tab-separated comparison table, ordered by method name, then paradigm,
/// arbiter and sparsity.
pub fn report_table(records: &[RunRecord]) -> Result<String> {
    check_compatible(records)?;
    let first = &records[0];
    let tasks: Vec<(String, String)> = first
        .final_val
        .tasks
        .iter()
        .map(|(t, m)| (t.to_string(), m.metric.clone()))
        .collect();

    type Key = (String, String, String, u64);
    let mut groups: BTreeMap<Key, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.config.method.to_string(),
            r.config.paradigm.to_string(),
            arbiter_label(r),
            r.config.sparsity.to_bits(),
        );
        groups.entry(key).or_default().push(r);
    }

    let mut out = String::from("method\tparadigm\tarbiter\tsparsity\tseeds\tachieved_sparsity\tval_loss_mean\tval_loss_std");
    for (t, metric) in &tasks {
        out.push_str(&format!("\t{t}_loss_mean\t{t}_loss_std\t{t}_{metric}_mean\t{t}_{metric}_std"));
    }
    out.push('\n');
    for ((method, paradigm, arbiter, sparsity), mut runs) in groups {
        runs.sort_by_key(|r| r.seed);
        let col = |f: &dyn Fn(&RunRecord) -> f64| mean_std(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();
        let (achieved, _) = col(&|r| r.achieved_sparsity);
        let (loss, loss_sd) = col(&|r| r.final_val.multitask_loss);
        out.push_str(&format!(
            "{method}\t{paradigm}\t{arbiter}\t{}\t{}\t{achieved:.6}\t{loss:.6}\t{loss_sd:.6}",
            f64::from_bits(sparsity),
            seeds.join(",")
        ));
        for (t, _) in &tasks {
            let get = |r: &RunRecord| {
                r.final_val
                    .tasks
                    .iter()
                    .find(|(id, _)| id.as_str() == t)
                    .map(|(_, m)| m.clone())
                    .ok_or_else(|| Error::Incompatible(format!("seed {} has no task `{t}`", r.seed)))
            };
            let metrics = runs.iter().map(|r| get(r)).collect::<Result<Vec<_>>>()?;
            let (lm, ls) = mean_std(&metrics.iter().map(|m| m.loss).collect::<Vec<_>>());
            let (vm, vs) = mean_std(&metrics.iter().map(|m| m.value).collect::<Vec<_>>());
            out.push_str(&format!("\t{lm:.6}\t{ls:.6}\t{vm:.6}\t{vs:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Loads every record under `paths` and builds the comparison table.
pub fn report_paths(paths: &[PathBuf]) -> Result<String> {
    let files = find_records(paths)?;
    if files.is_empty() {
        return Err(Error::Config("no record.json found under the given paths".into()));
    }
    let records = files.iter().map(|p| RunRecord::load(p)).collect::<Result<Vec<_>>>()?;
    report_table(&records)
}
