//! Scheduled prune-and-grow updates for sparse training from scratch.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arbiter::{merge, ArbiterKind};
use crate::error::{Error, Result};
use crate::mask::{Group, LayerId, Mask, MaskSet};
use crate::model::{Batch, MultitaskModel};
use crate::saliency::{saliency, Accumulation, Criterion, Objective, SaliencyVector};

use super::{check_sparsity, erk_counts_for, task_scores, top_gamma_bits, PruneState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicSchedule {
    /// Prune/grow fraction at the first update.
    pub alpha: f64,
    pub total_iterations: usize,
    /// Updates stop at `⌊end_fraction · total_iterations⌋`.
    pub end_fraction: f64,
    pub update_interval: usize,
}

impl DynamicSchedule {
    pub fn new(alpha: f64, total_iterations: usize, end_fraction: f64, update_interval: usize) -> Result<Self> {
        let s = DynamicSchedule {
            alpha,
            total_iterations,
            end_fraction,
            update_interval,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be at least 1".into()));
        }
        if !(self.end_fraction > 0.0 && self.end_fraction < 1.0) {
            return Err(Error::Config(format!(
                "end_fraction must lie in (0, 1), got {}",
                self.end_fraction
            )));
        }
        if self.t_end() == 0 || self.t_end() >= self.total_iterations {
            return Err(Error::Config(format!(
                "schedule over {} iterations has no update window",
                self.total_iterations
            )));
        }
        Ok(())
    }

    /// Last iteration at which masks may change.
    pub fn t_end(&self) -> usize {
        (self.end_fraction * self.total_iterations as f64).floor() as usize
    }

    /// Cosine-decayed update fraction; zero from `t_end` on.
    pub fn f_decay(&self, t: usize) -> f64 {
        let end = self.t_end();
        if t >= end {
            return 0.0;
        }
        self.alpha / 2.0 * (1.0 + (PI * t as f64 / end as f64).cos())
    }

    /// Updates happen every `update_interval` iterations and once more at
    /// `t_end` itself, where the fraction is zero and only the sparsity
    /// correction applies.
    pub fn is_update(&self, t: usize) -> bool {
        let end = self.t_end();
        t > 0 && t <= end && (t % self.update_interval == 0 || t == end)
    }

    pub fn update_iterations(&self) -> Vec<usize> {
        (1..=self.t_end()).filter(|&t| self.is_update(t)).collect()
    }
}

/// Adjusted prune rate after growth overshot the target:
/// `P̂ = 1 − (1 − S) / (1 − Ŝ) · (1 − P)`.
pub fn compensated_prune_rate(target_sparsity: f64, achieved_sparsity: f64, prune_rate: f64) -> f64 {
    1.0 - (1.0 - target_sparsity) / (1.0 - achieved_sparsity) * (1.0 - prune_rate)
}

/// How inactive connections are ranked for regrowth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowMethod {
    /// Each task ranks by its own gradient; shared picks are merged.
    Disparse(ArbiterKind),
    /// One ranking by the gradient of the summed loss.
    Combined,
    /// Uniformly random regrowth.
    Random,
}

/// Random initial masks with ERK per-layer kept counts over the full layout.
/// Returns the state and the target active count of each layer.
pub fn init_dynamic_masks<R: Rng + ?Sized>(
    model: &MultitaskModel,
    s: f64,
    rng: &mut R,
) -> Result<(PruneState, BTreeMap<LayerId, usize>)> {
    check_sparsity(s)?;
    let layout = model.full_layout()?;
    let counts = erk_counts_for(model, &layout, s)?;
    let mut masks = MaskSet {
        shared: Mask::zeros(model.group_layout(&Group::Shared)?),
        tasks: model
            .task_ids()
            .into_iter()
            .map(|t| Ok((t.clone(), Mask::zeros(model.group_layout(&Group::Task(t))?))))
            .collect::<Result<_>>()?,
    };
    let mut targets = BTreeMap::new();
    for (span, &n) in layout.spans().iter().zip(&counts) {
        let bits = masks.layer_bits_mut(&span.id).expect("layer in layout");
        for j in sample(rng, span.len, n) {
            bits[j] = true;
        }
        targets.insert(span.id.clone(), n);
    }
    Ok((PruneState::new(masks, s), targets))
}

/// Per-layer outcome of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub layer: LayerId,
    pub len: usize,
    pub target: usize,
    pub active_before: usize,
    /// Prune rate applied to the active set, after compensation.
    pub prune_rate: f64,
    pub pruned: usize,
    pub grown: usize,
    pub active_after: usize,
    pub density: f64,
    /// Requested regrowth that found no eligible slot.
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub f_decay: f64,
    pub achieved_sparsity: f64,
    pub active: usize,
    pub target_active: usize,
    pub layers: Vec<LayerUpdate>,
}

struct Plan {
    id: LayerId,
    to_grow: usize,
    just_pruned: Vec<bool>,
    update: LayerUpdate,
}

enum GrowScores {
    PerTask(BTreeMap<crate::mask::TaskId, SaliencyVector>),
    Single(SaliencyVector),
    Random,
    Unused,
}

/// One prune-and-grow update at iteration `t`.
///
/// Each layer first drops its smallest-magnitude active weights, then
/// regrows back to its target count from connections that were inactive
/// before the update. Pruned and grown weights are set to zero in `model`.
/// When the previous growth overshot a layer's target, the prune count is
/// raised by the compensation rule so the layer returns to its nominal
/// trajectory.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_step<R: Rng + ?Sized>(
    state: &mut PruneState,
    model: &mut MultitaskModel,
    targets: &BTreeMap<LayerId, usize>,
    schedule: &DynamicSchedule,
    method: GrowMethod,
    batches: &[Batch],
    accumulation: Accumulation,
    t: usize,
    rng: &mut R,
) -> Result<UpdateRecord> {
    if !schedule.is_update(t) {
        return Err(Error::Config(format!("iteration {t} is not an update step")));
    }
    if let GrowMethod::Disparse(arbiter) = method {
        arbiter.validate(model.tasks.len())?;
    }
    model.check_masks(&state.masks)?;
    let f = schedule.f_decay(t);
    let layout = model.full_layout()?;

    let mut plans = Vec::with_capacity(layout.spans().len());
    for span in layout.spans() {
        let n = *targets
            .get(&span.id)
            .ok_or_else(|| Error::Layout(format!("no target count for {}", span.id)))?;
        if n > span.len {
            return Err(Error::Layout(format!("target {n} exceeds size of {}", span.id)));
        }
        let bits = state.masks.layer_bits(&span.id).expect("checked layout").to_vec();
        let a = bits.iter().filter(|b| **b).count();
        let nominal_grow = ((f * n as f64).floor() as usize).min(n);
        // equals ⌊P̂ a⌋ with P̂ the compensated rate, since a − n is an integer
        let q = (a + nominal_grow).saturating_sub(n).min(a);
        let prune_rate = if a == 0 {
            0.0
        } else {
            let len = span.len as f64;
            compensated_prune_rate(1.0 - n as f64 / len, 1.0 - a as f64 / len, f)
        };

        let weights = model.param_mut(&span.id)?.data_mut();
        let magnitude: Vec<f64> = bits
            .iter()
            .zip(weights.iter())
            .map(|(&on, w)| if on { w.abs() } else { f64::NEG_INFINITY })
            .collect();
        let keep = top_gamma_bits(&magnitude, a - q)?;
        let just_pruned: Vec<bool> = bits.iter().zip(&keep).map(|(&b, &k)| b && !k).collect();
        for (w, &p) in weights.iter_mut().zip(&just_pruned) {
            if p {
                *w = 0.0;
            }
        }
        state
            .masks
            .layer_bits_mut(&span.id)
            .expect("checked layout")
            .copy_from_slice(&keep);
        plans.push(Plan {
            id: span.id.clone(),
            to_grow: n - (a - q),
            just_pruned,
            update: LayerUpdate {
                layer: span.id.clone(),
                len: span.len,
                target: n,
                active_before: a,
                prune_rate,
                pruned: q,
                grown: 0,
                active_after: 0,
                density: 0.0,
                shortfall: 0,
            },
        });
    }

    let scores = if plans.iter().all(|p| p.to_grow == 0) {
        GrowScores::Unused
    } else {
        match method {
            GrowMethod::Disparse(_) => GrowScores::PerTask(task_scores(
                model,
                Some(&state.masks),
                Criterion::DynamicGrow,
                batches,
                accumulation,
            )?),
            GrowMethod::Combined => GrowScores::Single(saliency(
                model,
                Some(&state.masks),
                &Objective::Combined,
                Criterion::DynamicGrow,
                batches,
                accumulation,
            )?),
            GrowMethod::Random => GrowScores::Random,
        }
    };

    let mut layers = Vec::with_capacity(plans.len());
    for mut plan in plans {
        let bits = state.masks.layer_bits(&plan.id).expect("checked layout").to_vec();
        let eligible: Vec<bool> = bits
            .iter()
            .zip(&plan.just_pruned)
            .map(|(&on, &p)| !on && !p)
            .collect();
        let available = eligible.iter().filter(|e| **e).count();
        let r = plan.to_grow.min(available);
        plan.update.shortfall = plan.to_grow - r;

        let ranked = |slice: &[f64]| -> Vec<f64> {
            slice
                .iter()
                .zip(&eligible)
                .map(|(&s, &e)| if e { s } else { f64::NEG_INFINITY })
                .collect()
        };
        let grown: Vec<bool> = if r == 0 {
            vec![false; bits.len()]
        } else {
            match (&scores, method) {
                (GrowScores::PerTask(per_task), GrowMethod::Disparse(arbiter)) => match &plan.id.group {
                    Group::Task(t) => top_gamma_bits(&ranked(layer_slice(&per_task[t], &plan.id)?), r)?,
                    Group::Shared => {
                        let picks = per_task
                            .values()
                            .map(|sv| Ok(Mask::from_bits(top_gamma_bits(&ranked(layer_slice(sv, &plan.id)?), r)?)))
                            .collect::<Result<Vec<_>>>()?;
                        let refs: Vec<&Mask> = picks.iter().collect();
                        merge(&refs, arbiter)?.bits().to_vec()
                    }
                },
                (GrowScores::Single(sv), _) => top_gamma_bits(&ranked(layer_slice(sv, &plan.id)?), r)?,
                _ => {
                    let draws: Vec<f64> = eligible
                        .iter()
                        .map(|&e| if e { rng.random::<f64>() } else { f64::NEG_INFINITY })
                        .collect();
                    top_gamma_bits(&draws, r)?
                }
            }
        };

        let weights = model.param_mut(&plan.id)?.data_mut();
        let mask_bits = state.masks.layer_bits_mut(&plan.id).expect("checked layout");
        let mut grown_count = 0;
        for j in 0..grown.len() {
            if grown[j] && eligible[j] {
                mask_bits[j] = true;
                weights[j] = 0.0;
                grown_count += 1;
            }
        }
        let active_after = mask_bits.iter().filter(|b| **b).count();
        plan.update.grown = grown_count;
        plan.update.active_after = active_after;
        plan.update.density = active_after as f64 / plan.update.len as f64;
        layers.push(plan.update);
    }

    state.iteration = t;
    state.refresh();
    Ok(UpdateRecord {
        iteration: t,
        f_decay: f,
        achieved_sparsity: state.achieved_sparsity,
        active: state.masks.kept(),
        target_active: targets.values().sum(),
        layers,
    })
}

fn layer_slice<'a>(sv: &'a SaliencyVector, id: &LayerId) -> Result<&'a [f64]> {
    sv.layout
        .span(id)
        .map(|s| &sv.scores[s.range()])
        .ok_or_else(|| Error::Layout(format!("no scores for {id}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_example() {
        let p = compensated_prune_rate(0.90, 0.88, 0.30);
        assert!((p - (1.0 - 0.10 / 0.12 * 0.70)).abs() < 1e-12);
        assert!((p - 0.416_666_666_666_7).abs() < 1e-9);
    }

    #[test]
    fn compensation_is_identity_on_target() {
        assert!((compensated_prune_rate(0.8, 0.8, 0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn decay_endpoints() {
        let s = DynamicSchedule::new(0.3, 5000, 0.75, 100).unwrap();
        assert_eq!(s.t_end(), 3750);
        assert_eq!(s.f_decay(0), 0.3);
        assert_eq!(s.f_decay(3750), 0.0);
        assert!((s.f_decay(1875) - 0.15).abs() < 1e-12);
        assert_eq!(s.f_decay(4000), 0.0);
    }

    #[test]
    fn decay_is_nonincreasing() {
        let s = DynamicSchedule::new(0.5, 1000, 0.75, 10).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..1000 {
            let f = s.f_decay(t);
            assert!(f <= prev && (0.0..=0.5).contains(&f));
            prev = f;
        }
    }

    #[test]
    fn update_grid_ends_at_t_end() {
        let s = DynamicSchedule::new(0.3, 5000, 0.75, 100).unwrap();
        let u = s.update_iterations();
        assert_eq!(u.first(), Some(&100));
        assert_eq!(u.last(), Some(&3750));
        assert_eq!(u.len(), 38);
        assert!(!s.is_update(0));
        assert!(!s.is_update(3800));
    }

    #[test]
    fn schedule_validation() {
        assert!(DynamicSchedule::new(0.3, 100, 0.75, 0).is_err());
        assert!(DynamicSchedule::new(1.5, 100, 0.75, 10).is_err());
        assert!(DynamicSchedule::new(0.3, 1, 0.75, 10).is_err());
        assert!(DynamicSchedule::new(0.3, 100, 1.0, 10).is_err());
    }
}
