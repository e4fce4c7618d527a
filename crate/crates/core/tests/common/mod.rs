#![allow(dead_code)]

use std::collections::BTreeMap;

use disparse_core::mask::{Mask, MaskSet, ParamKind, TaskId};
use disparse_core::model::{multitask_loss_value, Activation, ArchSpec, Batch, LossKind, MultitaskModel, Target, TaskSpec};
use disparse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const LOSSES: [LossKind; 4] = [LossKind::CrossEntropy, LossKind::Mse, LossKind::L1, LossKind::Cosine];

/// A small random multitask model with `k` tasks cycling through every loss.
pub fn tiny_model(seed: u64, k: usize, activation: Activation) -> MultitaskModel {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let arch = ArchSpec {
        input_dim: r.random_range(2..=4),
        trunk_widths: (0..depth).map(|_| r.random_range(2..=5)).collect(),
        head_hidden: r.random_range(2..=4),
        activation,
        mask_biases: r.random_bool(0.5),
    };
    let tasks = (0..k)
        .map(|i| {
            let loss = LOSSES[(seed as usize + i) % LOSSES.len()];
            let out = r.random_range(2..=3);
            TaskSpec {
                lambda: r.random_range(0.5..2.0),
                ..TaskSpec::new(format!("t{i}"), loss, out)
            }
        })
        .collect();
    let mut model = MultitaskModel::new(arch, tasks, &mut r).unwrap();
    // nonzero biases keep ReLU pre-activations off the kink when inputs are masked
    for id in model.param_ids() {
        if id.kind == ParamKind::Bias {
            for b in model.param_mut(&id).unwrap().data_mut() {
                *b = r.random_range(-0.5..0.5);
            }
        }
    }
    model
}

/// Random inputs in `[-1, 1]` and targets matching each task's loss.
pub fn random_batch(model: &MultitaskModel, rows: usize, seed: u64) -> Batch {
    let mut r = rng(seed ^ 0x5eed);
    let d = model.arch.input_dim;
    let x = Tensor::new(vec![rows, d], (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mut targets = BTreeMap::new();
    for t in &model.tasks {
        let target = match t.loss {
            LossKind::CrossEntropy => Target::Classes((0..rows).map(|_| r.random_range(0..t.out_dim)).collect()),
            _ => Target::Values(
                Tensor::new(
                    vec![rows, t.out_dim],
                    (0..rows * t.out_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            ),
        };
        targets.insert(t.id.clone(), target);
    }
    Batch { x, targets }
}

/// Masks keeping each position with probability `p`.
pub fn random_masks(model: &MultitaskModel, p: f64, seed: u64) -> MaskSet {
    let mut r = rng(seed ^ 0x3a5c);
    let mut masks = model.dense_masks().unwrap();
    for b in masks.shared.bits_mut() {
        *b = r.random_bool(p);
    }
    for m in masks.tasks.values_mut() {
        for b in m.bits_mut() {
            *b = r.random_bool(p);
        }
    }
    masks
}

pub fn random_mask(len: usize, p: f64, r: &mut impl Rng) -> Mask {
    Mask::from_bits((0..len).map(|_| r.random_bool(p)).collect())
}

pub fn task(name: &str) -> TaskId {
    TaskId::new(name)
}

/// Relative error with a floor on the denominator, so gradients that are
/// zero up to rounding compare by absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub const H: f64 = 1e-5;

/// Largest relative error between autograd and central differences over every
/// parameter entry. Entries whose perturbation crosses a ReLU kink (detected by
/// a second difference far above smooth curvature) are skipped and counted.
pub fn fd_check(model: &MultitaskModel, masks_p: Option<f64>, seed: u64) -> (f64, usize) {
    let batch = random_batch(model, 4, seed);
    let masks = masks_p.map(|p| random_masks(model, p, seed));
    let mut pass = model.masked_forward(masks.as_ref(), &batch.x, None).unwrap();
    let loss = pass.multitask_loss(&model.tasks, &batch.targets).unwrap();
    pass.backward(loss).unwrap();
    let l0 = pass.loss_value(loss);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut probe = model.clone();
    for id in model.param_ids() {
        let analytic = pass.param_grad(&id).unwrap().to_vec();
        for j in 0..analytic.len() {
            let orig = probe.param(&id).unwrap().data()[j];
            probe.param_mut(&id).unwrap().data_mut()[j] = orig + H;
            let up = multitask_loss_value(&probe, masks.as_ref(), &batch.x, &batch.targets).unwrap();
            probe.param_mut(&id).unwrap().data_mut()[j] = orig - H;
            let down = multitask_loss_value(&probe, masks.as_ref(), &batch.x, &batch.targets).unwrap();
            probe.param_mut(&id).unwrap().data_mut()[j] = orig;
            if model.arch.activation == Activation::Relu && (up - 2.0 * l0 + down).abs() > 1e-8 {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * H)));
        }
    }
    (worst, skipped)
}
