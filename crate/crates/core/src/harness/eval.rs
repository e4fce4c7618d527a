use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::COSINE_EPS;
use crate::error::{Error, Result};
use crate::mask::{MaskSet, TaskId};
use crate::model::{LossKind, MultitaskModel, Target};
use crate::tensor::Tensor;

use super::data::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Unweighted task loss.
    pub loss: f64,
    /// `accuracy`, `l1`, `mse` or `cosine_error`.
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `Σ_k λ^k ℓ^k` on the split.
    pub multitask_loss: f64,
    pub tasks: BTreeMap<TaskId, TaskMetrics>,
}

impl Evaluation {
    /// Largest per-task relative loss increase over `baseline`.
    pub fn worst_relative_increase(&self, baseline: &Evaluation) -> f64 {
        self.tasks
            .iter()
            .map(|(t, m)| {
                let base = baseline.tasks.get(t).map_or(f64::NAN, |b| b.loss);
                (m.loss - base) / base
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Loss and task metric of every head on `split`, with `masks` applied.
pub fn evaluate(model: &MultitaskModel, masks: Option<&MaskSet>, split: &Split) -> Result<Evaluation> {
    let mut pass = model.masked_forward(masks, &split.x, None)?;
    let (total, parts) = pass.multitask_loss_parts(&model.tasks, &split.targets)?;
    let mut tasks = BTreeMap::new();
    for (task, node) in parts {
        let spec = model.task(&task)?;
        let pred = pass.tape.value(pass.outputs[&task]);
        let target = split
            .targets
            .get(&task)
            .ok_or_else(|| Error::MissingTarget(task.to_string()))?;
        let (metric, value) = task_metric(spec.loss, pred, target)?;
        tasks.insert(
            task,
            TaskMetrics {
                loss: pass.loss_value(node),
                metric: metric.to_string(),
                value,
            },
        );
    }
    Ok(Evaluation {
        multitask_loss: pass.loss_value(total),
        tasks,
    })
}

fn task_metric(kind: LossKind, pred: &Tensor, target: &Target) -> Result<(&'static str, f64)> {
    let n = pred.rows() as f64;
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Classes(labels)) => {
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(r, &y)| {
                    let row = pred.row(*r);
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                        .0;
                    best == y
                })
                .count();
            Ok(("accuracy", correct as f64 / n))
        }
        (LossKind::L1, Target::Values(t)) => {
            let s: f64 = pred.data().iter().zip(t.data()).map(|(p, y)| (p - y).abs()).sum();
            Ok(("l1", s / pred.len() as f64))
        }
        (LossKind::Mse, Target::Values(t)) => {
            let s: f64 = pred.data().iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum();
            Ok(("mse", s / pred.len() as f64))
        }
        (LossKind::Cosine, Target::Values(t)) => {
            let mut s = 0.0;
            for r in 0..pred.rows() {
                let (p, y) = (pred.row(r), t.row(r));
                let dot: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
                let np = (p.iter().map(|a| a * a).sum::<f64>() + COSINE_EPS).sqrt();
                let ny = (y.iter().map(|a| a * a).sum::<f64>() + COSINE_EPS).sqrt();
                s += 1.0 - dot / (np * ny);
            }
            Ok(("cosine_error", s / n))
        }
        (kind, _) => Err(Error::Config(format!("target type does not match loss {kind:?}"))),
    }
}
