//! Mask generation and maintenance for the three sparsification paradigms.

mod dynamic;
mod erk;
mod oneshot;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerId, Mask, MaskLayout, MaskSet, TaskId};
use crate::model::MultitaskModel;

pub use dynamic::{
    compensated_prune_rate, dynamic_step, init_dynamic_masks, DynamicSchedule, GrowMethod, LayerUpdate,
    UpdateRecord,
};
pub use erk::{erk_allocation, erk_counts_for, ErkAllocation, LayerShape};
pub use oneshot::{
    calibrate_from_scores, calibrate_static_sparsity, disentangled_masks, kept_by_group, merge_task_masks,
    prune_pretrained, prune_with, select_mask, single_score_masks, static_sparsify, task_scores, Calibration,
    CalibrationReport, OneShotMethod,
};

/// How kept parameters are distributed over layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// One ranking over the whole span.
    #[default]
    Global,
    /// Per-layer budgets from the Erdős-Rényi-Kernel rule.
    Erk,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Global => "global",
            Scope::Erk => "erk",
        })
    }
}

/// Requested fraction of maskable parameters forced to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    pub sparsity: f64,
    #[serde(default)]
    pub scope: Scope,
}

impl SparsityTarget {
    pub fn new(sparsity: f64, scope: Scope) -> Result<Self> {
        check_sparsity(sparsity)?;
        Ok(SparsityTarget { sparsity, scope })
    }

    pub fn global(sparsity: f64) -> Result<Self> {
        Self::new(sparsity, Scope::Global)
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(Error::Sparsity(s))
    }
}

/// Number of parameters kept out of `n` at sparsity `s`: `⌊(1 − s) n⌋`.
///
/// Products that land within rounding noise of an integer are snapped to it,
/// so `s = 0.3, n = 10` keeps 7 rather than 6.
pub fn kept_count(s: f64, n: usize) -> usize {
    let x = (1.0 - s) * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    };
    (k.max(0.0) as usize).min(n)
}

/// Keeps the `gamma` highest scores. Equal scores are ordered by index, the
/// lower index winning, so the result is fully deterministic.
pub fn top_gamma_mask(scores: &[f64], gamma: usize) -> Result<Mask> {
    Ok(Mask::from_bits(top_gamma_bits(scores, gamma)?))
}

/// Like [`top_gamma_mask`] but with an explicit layout.
pub fn top_gamma_with_layout(scores: &[f64], gamma: usize, layout: MaskLayout) -> Result<Mask> {
    Mask::new(top_gamma_bits(scores, gamma)?, layout)
}

pub(crate) fn top_gamma_bits(scores: &[f64], gamma: usize) -> Result<Vec<bool>> {
    let n = scores.len();
    if gamma > n {
        return Err(Error::GammaOutOfRange { gamma, len: n });
    }
    let mut bits = vec![false; n];
    if gamma == 0 {
        return Ok(bits);
    }
    if gamma == n {
        return Ok(vec![true; n]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    order.select_nth_unstable_by(gamma - 1, by_rank);
    for &j in &order[..gamma] {
        bits[j] = true;
    }
    Ok(bits)
}

/// Masks of a run plus the bookkeeping the paradigms share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub masks: MaskSet,
    /// Pre-merge mask of each task over its shared-plus-private scope.
    /// Empty for methods that rank a single score vector.
    #[serde(default)]
    pub task_masks: BTreeMap<TaskId, Mask>,
    pub requested_sparsity: f64,
    /// Sparsity actually passed to the per-task selection after calibration.
    pub internal_sparsity: f64,
    pub achieved_sparsity: f64,
    pub iteration: usize,
}

impl PruneState {
    pub fn new(masks: MaskSet, requested: f64) -> Self {
        let achieved = masks.sparsity();
        PruneState {
            masks,
            task_masks: BTreeMap::new(),
            requested_sparsity: requested,
            internal_sparsity: requested,
            achieved_sparsity: achieved,
            iteration: 0,
        }
    }

    pub fn refresh(&mut self) {
        self.achieved_sparsity = self.masks.sparsity();
    }

    /// Indices of kept connections within one layer.
    pub fn active_indices(&self, id: &LayerId) -> Vec<usize> {
        self.masks
            .layer_bits(id)
            .map(|bits| bits.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect())
            .unwrap_or_default()
    }

    /// Shared span of each task's pre-merge mask.
    pub fn shared_task_masks(&self, model: &MultitaskModel) -> Result<BTreeMap<TaskId, Mask>> {
        let m_c = model.m_c();
        self.task_masks
            .iter()
            .map(|(t, m)| Ok((t.clone(), m.split_at(m_c)?.0)))
            .collect()
    }
}
