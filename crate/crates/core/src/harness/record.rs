//! Run records and the files written for each run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{layerwise_iou, DEFAULT_DROP_THRESHOLD};
use crate::config::ExperimentConfig;
use crate::engine::{CalibrationReport, PruneState, UpdateRecord};
use crate::error::{Error, Result};
use crate::mask::{Mask, MaskSet, TaskId};
use crate::model::{Checkpoint, MultitaskModel};

use super::eval::Evaluation;

pub const RUN_SCHEMA: &str = "disparse-run/v1";
pub const MASK_SCHEMA: &str = "disparse-masks/v1";

/// Training loss sampled every `log_every` iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub tasks: Vec<TaskId>,
    pub iteration: Vec<usize>,
    pub total: Vec<f64>,
    /// One row per sample, columns in `tasks` order.
    pub per_task: Vec<Vec<f64>>,
}

impl LossCurve {
    pub fn new(tasks: Vec<TaskId>) -> Self {
        LossCurve {
            tasks,
            ..Default::default()
        }
    }

    pub fn push(&mut self, iteration: usize, total: f64, per_task: Vec<f64>) {
        self.iteration.push(iteration);
        self.total.push(total);
        self.per_task.push(per_task);
    }

    pub fn len(&self) -> usize {
        self.iteration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iteration.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iteration\ttotal");
        for t in &self.tasks {
            out.push('\t');
            out.push_str(t.as_str());
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{}\t{}", self.iteration[i], self.total[i]));
            for v in &self.per_task[i] {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub maskable: usize,
    pub shared: usize,
    pub per_task: BTreeMap<TaskId, usize>,
}

impl ParamCounts {
    pub fn of(model: &MultitaskModel) -> Result<Self> {
        Ok(ParamCounts {
            total: model.num_params(),
            maskable: model.m(),
            shared: model.m_c(),
            per_task: model
                .task_ids()
                .into_iter()
                .map(|t| Ok((t.clone(), model.m_k(&t)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Everything needed to reconstruct a run given the code version. Wall-clock
/// time is kept out of it (see `timing.json`) so reruns compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub params: ParamCounts,
    /// Zero for dense runs.
    pub achieved_sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationReport>,
    pub mask_updates: usize,
    pub train_loss: LossCurve,
    /// Pre-trained paradigm: the dense model before pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_val: Option<Evaluation>,
    /// Pre-trained paradigm: right after pruning, before fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_val: Option<Evaluation>,
    pub final_val: Evaluation,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunRecord = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if r.schema != RUN_SCHEMA {
            return Err(Error::parse(path, format!("unsupported schema `{}`", r.schema)));
        }
        Ok(r)
    }
}

/// Final masks of a run, plus each task's pre-merge mask when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub schema: String,
    pub masks: MaskSet,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub task_masks: BTreeMap<TaskId, Mask>,
}

impl MaskFile {
    pub fn new(state: &PruneState) -> Self {
        MaskFile {
            schema: MASK_SCHEMA.to_string(),
            masks: state.masks.clone(),
            task_masks: state.task_masks.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask file serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MaskFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if m.schema != MASK_SCHEMA {
            return Err(Error::parse(path, format!("unsupported schema `{}`", m.schema)));
        }
        Ok(m)
    }

    /// Shared span of each task's pre-merge mask.
    pub fn shared_task_masks(&self) -> Result<BTreeMap<TaskId, Mask>> {
        let m_c = self.masks.shared.len();
        self.task_masks
            .iter()
            .map(|(t, m)| Ok((t.clone(), m.split_at(m_c)?.0)))
            .collect()
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: MultitaskModel,
    pub state: Option<PruneState>,
    pub updates: Vec<UpdateRecord>,
    pub elapsed_secs: f64,
}

pub fn updates_ndjson(updates: &[UpdateRecord]) -> String {
    let mut out = String::new();
    for u in updates {
        out.push_str(&serde_json::to_string(u).expect("update serializes"));
        out.push('\n');
    }
    out
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes every artifact of a run into `dir`. Files are staged in a sibling
/// `.partial` directory and moved into place only when all writes succeed.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("run directory `{}` has no name", dir.display())))?;
    let staging = dir.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = write_files(&staging, out).and_then(|()| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn write_files(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir.join("record.json"), out.record.to_json())?;
    write(dir.join("config.toml"), out.record.config.to_toml())?;
    write(dir.join("loss_curve.tsv"), out.record.train_loss.to_tsv())?;
    let masks = out.state.as_ref().map(|s| s.masks.clone());
    write(dir.join("checkpoint.json"), Checkpoint::new(out.model.clone(), masks).to_json())?;
    if let Some(state) = &out.state {
        let file = MaskFile::new(state);
        write(dir.join("masks.json"), file.to_json())?;
        let shared = file.shared_task_masks()?;
        if shared.len() >= 2 {
            let refs: Vec<&Mask> = shared.values().collect();
            let profile = layerwise_iou(&refs)?.with_watershed(DEFAULT_DROP_THRESHOLD);
            write(dir.join("iou.tsv"), profile.to_tsv())?;
        }
    }
    if !out.updates.is_empty() {
        write(dir.join("updates.ndjson"), updates_ndjson(&out.updates))?;
    }
    write(
        dir.join("timing.json"),
        format!("{{\"wall_clock_secs\": {}}}\n", out.elapsed_secs),
    )?;
    Ok(())
}
