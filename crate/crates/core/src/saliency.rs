//! Per-task parameter importance under three criteria.
//!
//! All criteria differentiate the objective with respect to the effective
//! weights `θ ⊙ b` and derive their scores from that one gradient:
//!
//! * static: `|∂L/∂b_j| = |∂L/∂(θ_j b_j) · θ_j|`, normalized to sum to one;
//! * dynamic growth: `|∂L/∂θ_j|` taken at the masked point, so inactive
//!   connections are scored as if reactivated at zero;
//! * pre-trained: `|∂L/∂θ_j| · θ_j²`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskLayout, MaskSet, TaskId};
use crate::model::{Batch, MultitaskModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Static,
    DynamicGrow,
    Pretrained,
}

/// How per-batch gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Sum signed gradients over batches, then take magnitudes.
    #[default]
    Signed,
    /// Sum per-batch magnitudes.
    Abs,
}

/// Which loss the saliency differentiates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L^k` alone over `Θ^{kc}`.
    Task(TaskId),
    /// The weighted multitask loss over every maskable parameter.
    Combined,
}

impl Objective {
    pub fn label(&self) -> String {
        match self {
            Objective::Task(t) => t.to_string(),
            Objective::Combined => "combined".into(),
        }
    }

    /// Layout of the parameters the objective scores.
    pub fn layout(&self, model: &MultitaskModel) -> Result<MaskLayout> {
        match self {
            Objective::Task(t) => model.task_scope_layout(t),
            Objective::Combined => model.full_layout(),
        }
    }
}

/// Nonnegative per-parameter scores aligned with an objective's layout
/// (shared span first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    pub objective: Objective,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    pub layout: MaskLayout,
    /// Length of the leading shared span.
    pub shared_len: usize,
    pub batch_count: usize,
}

/// Per-layer summary used for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreSummary {
    pub layer: String,
    pub len: usize,
    pub sum: f64,
    pub mean: f64,
    pub max: f64,
    pub nonzero: usize,
}

impl SaliencyVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn shared_scores(&self) -> &[f64] {
        &self.scores[..self.shared_len]
    }

    pub fn private_scores(&self) -> &[f64] {
        &self.scores[self.shared_len..]
    }

    pub fn layer_summary(&self) -> Vec<LayerScoreSummary> {
        self.layout
            .spans()
            .iter()
            .map(|span| {
                let s = &self.scores[span.range()];
                let sum: f64 = s.iter().sum();
                LayerScoreSummary {
                    layer: span.id.to_string(),
                    len: span.len,
                    sum,
                    mean: sum / span.len.max(1) as f64,
                    max: s.iter().cloned().fold(0.0, f64::max),
                    nonzero: s.iter().filter(|v| **v != 0.0).count(),
                }
            })
            .collect()
    }

    /// JSON dump with the objective, criterion and per-layer summaries.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump {
            objective: String,
            criterion: Criterion,
            batch_count: usize,
            layers: Vec<LayerScoreSummary>,
        }
        serde_json::to_string_pretty(&Dump {
            objective: self.objective.label(),
            criterion: self.criterion,
            batch_count: self.batch_count,
            layers: self.layer_summary(),
        })
        .expect("summary serializes")
    }
}

/// Computes saliency scores of `objective` under `criterion`, evaluated on
/// the model with `masks` applied (dense when `None`).
pub fn saliency(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    objective: &Objective,
    criterion: Criterion,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<SaliencyVector> {
    if batches.is_empty() {
        return Err(Error::EmptyBatches);
    }
    let layout = objective.layout(model)?;
    let shared_len = model.m_c();
    let theta = model.flat_values(&layout)?;
    let mut acc = vec![0.0; layout.total()];

    for batch in batches {
        let grad = objective_gradient(model, masks, objective, batch, &layout)?;
        for (j, g) in grad.iter().enumerate() {
            let raw = match criterion {
                // ∂L/∂b_j = ∂L/∂(θ_j b_j) · θ_j
                Criterion::Static => g * theta[j],
                Criterion::DynamicGrow | Criterion::Pretrained => *g,
            };
            acc[j] += match accumulation {
                Accumulation::Signed => raw,
                Accumulation::Abs => raw.abs(),
            };
        }
    }

    let mut scores: Vec<f64> = acc.iter().map(|v| v.abs()).collect();
    match criterion {
        Criterion::Static => {
            let total: f64 = scores.iter().sum();
            if total == 0.0 || !total.is_finite() {
                return Err(Error::ZeroSaliency {
                    task: objective.label(),
                });
            }
            scores.iter_mut().for_each(|s| *s /= total);
        }
        Criterion::Pretrained => {
            scores
                .iter_mut()
                .zip(&theta)
                .for_each(|(s, t)| *s *= t * t);
        }
        Criterion::DynamicGrow => {}
    }
    Ok(SaliencyVector {
        objective: objective.clone(),
        criterion,
        scores,
        layout,
        shared_len,
        batch_count: batches.len(),
    })
}

/// Gradient of the objective's loss on one batch with respect to the
/// effective weights, flattened along `layout`.
pub fn objective_gradient(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    objective: &Objective,
    batch: &Batch,
    layout: &MaskLayout,
) -> Result<Vec<f64>> {
    let (mut pass, loss) = match objective {
        Objective::Task(task) => {
            let spec = model.task(task)?.clone();
            let target = batch
                .targets
                .get(task)
                .ok_or_else(|| Error::MissingTarget(task.to_string()))?;
            let mut pass = model.masked_forward(masks, &batch.x, Some(std::slice::from_ref(task)))?;
            let loss = pass.task_loss(&spec, target)?;
            (pass, loss)
        }
        Objective::Combined => {
            let mut pass = model.masked_forward(masks, &batch.x, None)?;
            let loss = pass.multitask_loss(&model.tasks, &batch.targets)?;
            (pass, loss)
        }
    };
    pass.backward(loss)?;
    pass.flat_effective_grad(layout)
}

/// Connection-sensitivity scores of task `k`, normalized over `Θ^{kc}`.
pub fn static_saliency(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    task: &TaskId,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<SaliencyVector> {
    saliency(
        model,
        masks,
        &Objective::Task(task.clone()),
        Criterion::Static,
        batches,
        accumulation,
    )
}

/// Gradient-magnitude growth scores of task `k`.
pub fn grow_saliency(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    task: &TaskId,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<SaliencyVector> {
    saliency(
        model,
        masks,
        &Objective::Task(task.clone()),
        Criterion::DynamicGrow,
        batches,
        accumulation,
    )
}

/// Gradient-times-squared-weight scores of task `k` on a trained model.
pub fn pretrained_saliency(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    task: &TaskId,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<SaliencyVector> {
    saliency(
        model,
        masks,
        &Objective::Task(task.clone()),
        Criterion::Pretrained,
        batches,
        accumulation,
    )
}

/// Scores for several objectives; objectives are evaluated on separate
/// threads over the same read-only model.
pub fn saliency_for_all(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    objectives: &[Objective],
    criterion: Criterion,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<BTreeMap<Objective, SaliencyVector>> {
    if objectives.len() == 1 {
        let s = saliency(model, masks, &objectives[0], criterion, batches, accumulation)?;
        return Ok(BTreeMap::from([(objectives[0].clone(), s)]));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = objectives
            .iter()
            .map(|o| {
                scope.spawn(move || {
                    saliency(model, masks, o, criterion, batches, accumulation).map(|s| (o.clone(), s))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("saliency worker panicked"))
            .collect()
    })
}
