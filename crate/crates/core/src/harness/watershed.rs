//! Models whose trunk is shared up to a chosen layer and task-private after
//! it, used as ground truth for watershed detection.

use rand::Rng;

use crate::analysis::{layerwise_iou, IoUProfile};
use crate::engine::{disentangled_masks, task_scores, PruneState, Scope};
use crate::arbiter::ArbiterKind;
use crate::error::{Error, Result};
use crate::mask::{LayerId, Mask, ParamKind};
use crate::model::{ArchSpec, Batch, MultitaskModel, TaskSpec};
use crate::saliency::{Accumulation, Criterion};

fn block_of(unit: usize, width: usize, k: usize) -> usize {
    unit * k / width
}

/// A freshly initialized model whose trunk units from layer `boundary` on are
/// split into one contiguous block per task. Layer `boundary` reads every
/// input, later trunk layers are block-diagonal and each head reads only its
/// own block, so a trunk unit at or past the boundary influences one task.
pub fn divergent_model<R: Rng + ?Sized>(
    arch: ArchSpec,
    tasks: Vec<TaskSpec>,
    boundary: usize,
    rng: &mut R,
) -> Result<MultitaskModel> {
    let mut model = MultitaskModel::new(arch, tasks, rng)?;
    let k = model.tasks.len();
    let depth = model.trunk.len();
    if boundary >= depth {
        return Err(Error::Config(format!("boundary {boundary} outside a trunk of {depth} layers")));
    }
    if model.arch.trunk_widths[boundary..].iter().any(|&w| w < k) {
        return Err(Error::Config("trunk layers past the boundary need one unit per task".into()));
    }
    for l in boundary + 1..depth {
        let (fi, fo) = (model.trunk[l].fan_in(), model.trunk[l].fan_out());
        let w = model.trunk[l].weight.data_mut();
        for i in 0..fi {
            for j in 0..fo {
                if block_of(i, fi, k) != block_of(j, fo, k) {
                    w[i * fo + j] = 0.0;
                }
            }
        }
    }
    for (b, head) in model.heads.values_mut().enumerate() {
        let (fi, fo) = (head[0].fan_in(), head[0].fan_out());
        let w = head[0].weight.data_mut();
        for i in 0..fi {
            if block_of(i, fi, k) != b {
                w[i * fo..(i + 1) * fo].fill(0.0);
            }
        }
    }
    Ok(model)
}

/// Layer id of trunk weight `boundary`, where the watershed is constructed.
pub fn boundary_layer(boundary: usize) -> LayerId {
    LayerId::shared(boundary, ParamKind::Weight)
}

/// Per-task static masks at sparsity `s` and the K-way IoU of their shared
/// spans.
pub fn shared_mask_iou(
    model: &MultitaskModel,
    batches: &[Batch],
    s: f64,
    accumulation: Accumulation,
) -> Result<(PruneState, IoUProfile)> {
    let scores = task_scores(model, None, Criterion::Static, batches, accumulation)?;
    let state = disentangled_masks(model, &scores, s, Scope::Global, ArbiterKind::OR)?;
    let shared: Vec<Mask> = state
        .task_masks
        .values()
        .map(|m| Ok(m.split_at(model.m_c())?.0))
        .collect::<Result<_>>()?;
    let refs: Vec<&Mask> = shared.iter().collect();
    let profile = layerwise_iou(&refs)?;
    Ok((state, profile))
}
