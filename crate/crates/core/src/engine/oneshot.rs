//! One-shot mask generation: at initialization (static) or on a trained
//! model (pretrained).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arbiter::{check_spans, merge, split_full_mask, ArbiterKind};
use crate::error::{Error, Result};
use crate::mask::{Mask, MaskLayout, MaskSet, TaskId};
use crate::model::{Batch, MultitaskModel};
use crate::saliency::{saliency, saliency_for_all, Accumulation, Criterion, Objective, SaliencyVector};

use super::{check_sparsity, erk_counts_for, kept_count, top_gamma_bits, PruneState, Scope, SparsityTarget};

/// Settings of the search for the internal per-task sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub enabled: bool,
    /// Accepted overshoot above the requested sparsity.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            enabled: true,
            tol: 0.005,
            max_iters: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub requested: f64,
    pub internal: f64,
    pub achieved: f64,
    /// Number of mask evaluations.
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// How a one-shot mask is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneShotMethod {
    /// Per-task saliency over each task's scope, merged by an arbiter.
    Disparse(ArbiterKind),
    /// Saliency of the summed multitask loss over all parameters.
    Combined,
    /// Parameter magnitude `|θ|`.
    Magnitude,
    /// Uniformly random ranking.
    Random,
}

/// Saliency of every task over its own scope.
pub fn task_scores(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    criterion: Criterion,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<BTreeMap<TaskId, SaliencyVector>> {
    let objectives: Vec<Objective> = model.task_ids().into_iter().map(Objective::Task).collect();
    let scores = saliency_for_all(model, masks, &objectives, criterion, batches, accumulation)?;
    Ok(scores
        .into_iter()
        .map(|(o, s)| match o {
            Objective::Task(t) => (t, s),
            Objective::Combined => unreachable!("only task objectives requested"),
        })
        .collect())
}

/// Keeps the best-scored entries of `scores` (aligned with `layout`) at
/// sparsity `s ∈ [0, 1)`, globally or with ERK per-layer budgets.
pub fn select_mask(
    model: &MultitaskModel,
    layout: &MaskLayout,
    scores: &[f64],
    s: f64,
    scope: Scope,
) -> Result<Mask> {
    layout.validate(scores.len())?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Sparsity(s));
    }
    let bits = match scope {
        Scope::Global => top_gamma_bits(scores, kept_count(s, scores.len()))?,
        Scope::Erk if s == 0.0 => vec![true; scores.len()],
        Scope::Erk => {
            let counts = erk_counts_for(model, layout, s)?;
            let mut bits = Vec::with_capacity(scores.len());
            for (span, &n) in layout.spans().iter().zip(&counts) {
                bits.extend(top_gamma_bits(&scores[span.range()], n)?);
            }
            bits
        }
    };
    Mask::new(bits, layout.clone())
}

/// Splits each task mask into its shared and private parts, merges the
/// shared parts with `arbiter` and assembles the full mask set.
pub fn merge_task_masks(
    model: &MultitaskModel,
    task_masks: &BTreeMap<TaskId, Mask>,
    arbiter: ArbiterKind,
) -> Result<MaskSet> {
    let m_c = model.m_c();
    let mut shared_parts = Vec::with_capacity(task_masks.len());
    let mut private = BTreeMap::new();
    for (t, m) in task_masks {
        let (shared, mine) = m.split_at(m_c)?;
        shared_parts.push(shared);
        private.insert(t.clone(), mine);
    }
    let refs: Vec<&Mask> = shared_parts.iter().collect();
    let shared = merge(&refs, arbiter)?;
    let task_lens = model
        .task_ids()
        .into_iter()
        .map(|t| {
            let n = model.m_k(&t)?;
            Ok((t, n))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    check_spans(&shared, &private, m_c, &task_lens)?;
    let masks = crate::arbiter::assemble_full_mask(shared, private)?;
    model.check_masks(&masks)?;
    Ok(masks)
}

/// Per-task selection at internal sparsity `s`, then arbiter merge.
pub fn disentangled_masks(
    model: &MultitaskModel,
    scores: &BTreeMap<TaskId, SaliencyVector>,
    s: f64,
    scope: Scope,
    arbiter: ArbiterKind,
) -> Result<PruneState> {
    let mut task_masks = BTreeMap::new();
    for (t, sv) in scores {
        task_masks.insert(t.clone(), select_mask(model, &sv.layout, &sv.scores, s, scope)?);
    }
    let masks = merge_task_masks(model, &task_masks, arbiter)?;
    let mut state = PruneState::new(masks, s);
    state.task_masks = task_masks;
    state.internal_sparsity = s;
    Ok(state)
}

/// Searches the internal per-task sparsity so that the merged mask reaches
/// `target.sparsity ≤ Ŝ ≤ target.sparsity + tol`. The returned state always
/// satisfies `Ŝ ≥ S`.
pub fn calibrate_from_scores(
    model: &MultitaskModel,
    scores: &BTreeMap<TaskId, SaliencyVector>,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    calibration: &Calibration,
) -> Result<(PruneState, CalibrationReport)> {
    let s = target.sparsity;
    check_sparsity(s)?;
    if !(calibration.tol > 0.0) {
        return Err(Error::Config(format!("calibration tolerance must be positive, got {}", calibration.tol)));
    }
    let k = scores.len();
    let in_range = |a: f64| a >= s && a <= s + calibration.tol;
    let eval = |internal: f64| -> Result<PruneState> {
        let mut st = disentangled_masks(model, scores, internal, target.scope, arbiter)?;
        st.requested_sparsity = s;
        Ok(st)
    };
    let report = |st: &PruneState, iterations: usize, diagnostic: Option<String>| CalibrationReport {
        requested: s,
        internal: st.internal_sparsity,
        achieved: st.achieved_sparsity,
        iterations,
        converged: diagnostic.is_none(),
        diagnostic,
    };

    let first = eval(s)?;
    // one task: the merge is the identity, so there is no union to offset
    if !calibration.enabled || k == 1 || in_range(first.achieved_sparsity) {
        let why = if k == 1 { "single task" } else { "calibration disabled" };
        let diag = (!in_range(first.achieved_sparsity))
            .then(|| format!("{why}; achieved {:.6}", first.achieved_sparsity));
        let r = report(&first, 1, diag);
        return Ok((first, r));
    }

    let mut iterations = 1;
    // `lo` always undershoots the request, `hi` always meets it.
    let (mut lo, mut hi, mut best) = if first.achieved_sparsity < s {
        // each task keeping (1 − S)/K of its scope bounds the union by (1 − S)m
        // (ERK rounding can still undershoot by a few units, hence the floor at S + tol)
        let upper = (1.0 - (1.0 - s) / k as f64).max(s + calibration.tol).min(1.0 - f64::EPSILON);
        let at_upper = eval(upper)?;
        iterations += 1;
        if in_range(at_upper.achieved_sparsity) {
            let r = report(&at_upper, iterations, None);
            return Ok((at_upper, r));
        }
        if at_upper.achieved_sparsity < s {
            let diag = format!(
                "internal sparsity {upper:.6} still achieves only {:.6}",
                at_upper.achieved_sparsity
            );
            let r = report(&at_upper, iterations, Some(diag));
            return Ok((at_upper, r));
        }
        (s, upper, at_upper)
    } else {
        (0.0, s, first)
    };
    while iterations < calibration.max_iters {
        let mid = 0.5 * (lo + hi);
        let st = eval(mid)?;
        iterations += 1;
        if in_range(st.achieved_sparsity) {
            let r = report(&st, iterations, None);
            return Ok((st, r));
        }
        if st.achieved_sparsity < s {
            lo = mid;
        } else {
            hi = mid;
            best = st;
        }
    }
    let diag = format!(
        "no internal sparsity within tolerance after {iterations} evaluations; best achieved {:.6} at internal {:.6}",
        best.achieved_sparsity, best.internal_sparsity
    );
    let r = report(&best, iterations, Some(diag));
    Ok((best, r))
}

/// Per-task connection-sensitivity masks at exactly the requested internal
/// sparsity, merged by `arbiter`. The model should be at initialization.
pub fn static_sparsify(
    model: &MultitaskModel,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: &[Batch],
    accumulation: Accumulation,
) -> Result<PruneState> {
    let scores = task_scores(model, None, Criterion::Static, batches, accumulation)?;
    let mut st = disentangled_masks(model, &scores, target.sparsity, target.scope, arbiter)?;
    st.requested_sparsity = target.sparsity;
    Ok(st)
}

/// [`static_sparsify`] with the internal sparsity raised until the merged
/// mask meets the request. Saliency is computed once; only the selection is
/// repeated.
pub fn calibrate_static_sparsity(
    model: &MultitaskModel,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: &[Batch],
    accumulation: Accumulation,
    calibration: &Calibration,
) -> Result<(PruneState, CalibrationReport)> {
    let scores = task_scores(model, None, Criterion::Static, batches, accumulation)?;
    calibrate_from_scores(model, &scores, target, arbiter, calibration)
}

/// Masks from one score vector over the full layout (shared, then heads).
pub fn single_score_masks(model: &MultitaskModel, scores: &[f64], target: SparsityTarget) -> Result<PruneState> {
    let layout = model.full_layout()?;
    let full = select_mask(model, &layout, scores, target.sparsity, target.scope)?;
    let lens = model
        .task_ids()
        .into_iter()
        .map(|t| {
            let n = model.m_k(&t)?;
            Ok((t, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = split_full_mask(&full, model.m_c(), &lens)?;
    model.check_masks(&masks)?;
    Ok(PruneState::new(masks, target.sparsity))
}

/// One-shot masks ranked by `method`. `criterion` picks the saliency used by
/// the two gradient-based methods. Returns the calibration report when the
/// disentangled method is calibrated.
#[allow(clippy::too_many_arguments)]
pub fn prune_with<R: Rng + ?Sized>(
    model: &MultitaskModel,
    criterion: Criterion,
    method: OneShotMethod,
    target: SparsityTarget,
    batches: &[Batch],
    accumulation: Accumulation,
    calibration: &Calibration,
    rng: &mut R,
) -> Result<(PruneState, Option<CalibrationReport>)> {
    check_sparsity(target.sparsity)?;
    match method {
        OneShotMethod::Disparse(arbiter) => {
            arbiter.validate(model.tasks.len())?;
            let scores = task_scores(model, None, criterion, batches, accumulation)?;
            let (st, report) = calibrate_from_scores(model, &scores, target, arbiter, calibration)?;
            Ok((st, Some(report)))
        }
        OneShotMethod::Combined => {
            let sv = saliency(model, None, &Objective::Combined, criterion, batches, accumulation)?;
            Ok((single_score_masks(model, &sv.scores, target)?, None))
        }
        OneShotMethod::Magnitude => {
            let layout = model.full_layout()?;
            let scores: Vec<f64> = model.flat_values(&layout)?.iter().map(|v| v.abs()).collect();
            Ok((single_score_masks(model, &scores, target)?, None))
        }
        OneShotMethod::Random => {
            let scores: Vec<f64> = (0..model.m()).map(|_| rng.random::<f64>()).collect();
            Ok((single_score_masks(model, &scores, target)?, None))
        }
    }
}

/// Prunes a trained model with the pre-trained criterion `|∂L/∂θ| θ²`.
/// Fine-tuning with the masks frozen is left to the caller.
pub fn prune_pretrained<R: Rng + ?Sized>(
    model: &MultitaskModel,
    method: OneShotMethod,
    target: SparsityTarget,
    batches: &[Batch],
    accumulation: Accumulation,
    calibration: &Calibration,
    rng: &mut R,
) -> Result<(PruneState, Option<CalibrationReport>)> {
    prune_with(model, Criterion::Pretrained, method, target, batches, accumulation, calibration, rng)
}

/// Per-group kept counts, for diagnostics.
pub fn kept_by_group(masks: &MaskSet) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    out.insert("shared".to_string(), (masks.shared.count_ones(), masks.shared.len()));
    for (t, m) in &masks.tasks {
        out.insert(t.to_string(), (m.count_ones(), m.len()));
    }
    out
}
