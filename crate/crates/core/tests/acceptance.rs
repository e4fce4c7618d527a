//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use disparse_core::analysis::DEFAULT_DROP_THRESHOLD;
use disparse_core::engine::{
    calibrate_static_sparsity, compensated_prune_rate, kept_count, static_sparsify, task_scores, disentangled_masks,
};
use disparse_core::harness::watershed::{boundary_layer, divergent_model, shared_mask_iou};
use disparse_core::harness::{run, run_observed, suite_for, write_run, Batcher, RunOutput, SuiteTask};
use disparse_core::mask::Mask;
use disparse_core::model::Activation;
use disparse_core::report::report_paths;
use disparse_core::rng::{stream, Stream};
use disparse_core::{
    detect_watershed, layerwise_iou, merge, pairwise_iou, ArbiterKind, Checkpoint, Criterion, ExperimentConfig,
    MaskSet, Method, MultitaskModel, Paradigm, Scope, SparsityTarget,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn reference(paradigm: Paradigm, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        paradigm,
        method,
        ..ExperimentConfig::default()
    }
}

fn dense_checkpoint(config: &ExperimentConfig, seed: u64) -> Checkpoint {
    let dense = ExperimentConfig {
        paradigm: Paradigm::Dense,
        ..config.clone()
    };
    Checkpoint::new(run(&dense, seed, None).unwrap().model, None)
}

fn masks_of(out: &RunOutput) -> &MaskSet {
    &out.state.as_ref().expect("sparse run").masks
}

fn gradient_correctness() -> Check {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let model = tiny_model(seed, 1 + seed as usize % 3, Activation::Tanh);
        let (w, _) = fd_check(&model, (seed % 2 == 0).then_some(0.7), seed);
        worst = worst.max(w);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(worst < 1e-4, format!("worst relative error {worst:.2e}"))?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("100 models, worst relative error {worst:.2e} < 1e-4, {secs:.1} s < 60 s"))
}

fn mask_cardinality() -> Check {
    let config = ExperimentConfig::default();
    let suite = suite_for(&config, 1).unwrap();
    let model = MultitaskModel::new(config.arch_spec(), config.suite.task_specs(), &mut stream(1, Stream::Init)).unwrap();
    let batches = Batcher::draw(&suite.train, config.train.batch_size, config.saliency.batches, &mut stream(1, Stream::Saliency))
        .unwrap();
    let mut achieved = Vec::new();
    for s in [0.3, 0.5, 0.7, 0.9] {
        let st = static_sparsify(&model, SparsityTarget::global(s).unwrap(), ArbiterKind::OR, &batches, config.saliency.accumulation)
            .unwrap();
        for (t, m) in &st.task_masks {
            let want = kept_count(s, model.m_c() + model.m_k(t).unwrap());
            ensure(m.count_ones() == want, format!("S={s} task {t}: kept {} != {want}", m.count_ones()))?;
        }
        for scope in [Scope::Global, Scope::Erk] {
            let (st, _) = calibrate_static_sparsity(
                &model,
                SparsityTarget::new(s, scope).unwrap(),
                ArbiterKind::OR,
                &batches,
                config.saliency.accumulation,
                &config.calibration,
            )
            .unwrap();
            let a = st.achieved_sparsity;
            ensure((s..=s + 0.005).contains(&a), format!("S={s} {scope}: calibrated Ŝ={a}"))?;
            achieved.push(format!("{a:.4}"));
        }
    }
    Ok(format!("per-task counts exact; calibrated Ŝ (global, erk) = [{}] within [S, S+0.005]", achieved.join(", ")))
}

fn arbiter_enumeration() -> Check {
    let started = Instant::now();
    let masks: Vec<Mask> = (0..64u32).map(|c| Mask::from_bits((0..6).map(|i| c >> i & 1 == 1).collect())).collect();
    let subset = |a: &Mask, b: &Mask| a.bits().iter().zip(b.bits()).all(|(x, y)| !x || *y);
    let mut combos = 0;
    for a in &masks {
        for b in &masks {
            for c in &masks {
                let refs = [a, b, c];
                let or = merge(&refs, ArbiterKind::OR).unwrap();
                for m in refs {
                    ensure(subset(m, &or), "OR misses a task's keep-set")?;
                }
                for tie in [true, false] {
                    let maj = merge(&refs, ArbiterKind::majority(tie)).unwrap();
                    ensure(subset(&maj, &or), "majority keeps outside OR")?;
                }
                combos += 1;
            }
        }
        let same = [a, a, a];
        ensure(&merge(&same, ArbiterKind::OR).unwrap() == a, "OR not idempotent")?;
        ensure(&merge(&same, ArbiterKind::majority(true)).unwrap() == a, "majority not idempotent")?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(combos == 1 << 18, format!("{combos} combinations"))?;
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("{combos} combinations, {secs:.2} s < 10 s"))
}

fn single_task_reduction() -> Check {
    let one_task = |paradigm, method| {
        let mut c = reference(paradigm, method);
        c.suite.tasks = vec![SuiteTask::classification("class", 4)];
        c.train.iterations = 1000;
        c.train.finetune_iterations = 100;
        c.schedule.update_interval = 50;
        c
    };
    let mut parts = Vec::new();
    for paradigm in [Paradigm::Static, Paradigm::Dynamic, Paradigm::Pretrained] {
        let ours = one_task(paradigm, Method::Disparse);
        let base = one_task(paradigm, Method::BaselineCombined);
        for seed in 1..=3 {
            let ck = (paradigm == Paradigm::Pretrained).then(|| dense_checkpoint(&ours, seed));
            let a = run(&ours, seed, ck.as_ref()).unwrap();
            let b = run(&base, seed, ck.as_ref()).unwrap();
            ensure(masks_of(&a) == masks_of(&b), format!("{paradigm} seed {seed}: masks differ"))?;
        }
        parts.push(paradigm.to_string());
    }
    Ok(format!("masks bit-identical for {} (3 seeds each)", parts.join(", ")))
}

fn dynamic_conservation() -> Check {
    let formula = compensated_prune_rate(0.90, 0.88, 0.30);
    ensure((formula - 0.41667).abs() < 1e-5, format!("formula gives {formula}"))?;
    ensure((formula - (1.0 - 0.10 / 0.12 * 0.70)).abs() < 1e-9, format!("formula gives {formula}"))?;

    let config = reference(Paradigm::Dynamic, Method::Disparse);
    let out = run(&config, 1, None).unwrap();
    ensure(config.train.iterations == 5000, "reference run is not 5k iterations")?;
    let (mut exact, mut overshoots, mut recovered) = (0, 0, 0);
    let mut prev: Option<&disparse_core::engine::UpdateRecord> = None;
    for u in &out.updates {
        for (i, l) in u.layers.iter().enumerate() {
            let nominal = (u.f_decay * l.target as f64).floor() as usize;
            if l.active_before > 0 {
                let q = (l.prune_rate * l.active_before as f64 + 1e-9).floor() as usize;
                ensure(q == l.pruned, format!("t={} {}: pruned {} != ⌊P̂ a⌋ = {q}", u.iteration, l.layer, l.pruned))?;
            }
            let over_before = prev.is_some_and(|p| p.layers[i].active_after > p.layers[i].target);
            if over_before {
                // the compensated rate brings the layer back onto its trajectory
                ensure(
                    l.active_before - l.pruned == l.target - nominal,
                    format!("t={} {}: no recovery after overshoot", u.iteration, l.layer),
                )?;
                recovered += 1;
            } else if l.shortfall == 0 {
                ensure(
                    l.active_before == l.target,
                    format!("t={} {}: active {} before update, target {}", u.iteration, l.layer, l.active_before, l.target),
                )?;
            }
            if l.active_after > l.target {
                overshoots += 1;
            } else if l.shortfall == 0 {
                ensure(l.active_after == l.target, format!("t={} {}: active {} != target {}", u.iteration, l.layer, l.active_after, l.target))?;
                exact += 1;
            }
        }
        prev = Some(u);
    }
    let last = out.updates.last().ok_or("no updates")?;
    for l in &last.layers {
        ensure(l.active_after == l.target, format!("{} ends at {} != {}", l.layer, l.active_after, l.target))?;
    }
    Ok(format!(
        "{} updates: {exact} layer updates exactly on target, {overshoots} overshoots, {recovered} recoveries; P̂(0.90, 0.88, 0.30) = {formula:.5}",
        out.updates.len()
    ))
}

fn schedule() -> Check {
    let config = reference(Paradigm::Dynamic, Method::Disparse);
    let sched = config.dynamic_schedule().unwrap();
    let t_end = sched.t_end();
    ensure(t_end == (0.75 * config.train.iterations as f64).floor() as usize, "t_end")?;
    let mut at_end: Option<MaskSet> = None;
    let mut late_changes = 0;
    let mut observer = |t: usize, _: &MultitaskModel, masks: Option<&MaskSet>| {
        let masks = masks.unwrap();
        if t == t_end {
            at_end = Some(masks.clone());
        } else if t > t_end && at_end.as_ref() != Some(masks) {
            late_changes += 1;
        }
    };
    run_observed(&config, 2, None, Some(&mut observer)).unwrap();
    ensure(late_changes == 0, format!("{late_changes} steps after {t_end} saw changed masks"))?;
    let alpha = sched.alpha;
    ensure(sched.f_decay(0) == alpha, "f_decay(0) != α")?;
    ensure(sched.f_decay(t_end) == 0.0, "f_decay(T_end) != 0")?;
    let mid = sched.f_decay(t_end / 2);
    ensure((mid - alpha / 2.0).abs() < 1e-12, format!("midpoint {mid}"))?;
    Ok(format!("no mask change after t={t_end}; f_decay = {alpha}, {mid}, 0 at 0, T_end/2, T_end"))
}

fn mean_val_loss(config: &ExperimentConfig) -> f64 {
    (1..=5).map(|s| run(config, s, None).unwrap().record.final_val.multitask_loss).sum::<f64>() / 5.0
}

fn qualitative_ordering() -> Check {
    let mut lines = Vec::new();
    for (paradigm, baseline) in [(Paradigm::Static, Method::Random), (Paradigm::Dynamic, Method::BaselineCombined)] {
        let started = Instant::now();
        let ours = mean_val_loss(&reference(paradigm, Method::Disparse));
        let theirs = mean_val_loss(&reference(paradigm, baseline));
        let secs = started.elapsed().as_secs_f64();
        ensure(secs < 600.0, format!("{paradigm} comparison took {secs:.0} s"))?;
        ensure(ours < theirs, format!("{paradigm}: disparse {ours:.4} vs {baseline} {theirs:.4}"))?;
        lines.push(format!("{paradigm}: disparse {ours:.4} < {baseline} {theirs:.4} ({secs:.0} s)"));
    }
    Ok(lines.join("; "))
}

fn balance() -> Check {
    let config = ExperimentConfig {
        sparsity: 0.5,
        ..reference(Paradigm::Pretrained, Method::Disparse)
    };
    let combined = ExperimentConfig {
        method: Method::BaselineCombined,
        ..config.clone()
    };
    let (mut ours, mut theirs) = (0.0, 0.0);
    for seed in 1..=10 {
        let ck = dense_checkpoint(&config, seed);
        let increase = |c: &ExperimentConfig| {
            let r = run(c, seed, Some(&ck)).unwrap().record;
            r.pruned_val.unwrap().worst_relative_increase(&r.dense_val.unwrap())
        };
        ours += increase(&config) / 10.0;
        theirs += increase(&combined) / 10.0;
    }
    ensure(ours <= theirs, format!("disparse {ours:.4} > combined {theirs:.4}"))?;
    Ok(format!("mean worst-task relative increase: disparse {ours:.4} <= combined {theirs:.4}"))
}

fn iou_analysis() -> Check {
    // a task and its exact duplicate
    let mut config = ExperimentConfig::default();
    config.suite.tasks = vec![SuiteTask::classification("a", 4), SuiteTask::classification("b", 4)];
    let suite = suite_for(&config, 1).unwrap();
    let mut model = MultitaskModel::new(config.arch_spec(), config.suite.task_specs(), &mut stream(1, Stream::Init)).unwrap();
    let head = model.heads[&task("a")].clone();
    model.heads.insert(task("b"), head);
    let mut batches = Batcher::draw(&suite.train, 16, 8, &mut stream(1, Stream::Saliency)).unwrap();
    for b in &mut batches {
        let t = b.targets[&task("a")].clone();
        b.targets.insert(task("b"), t);
    }
    let (_, dup) = shared_mask_iou(&model, &batches, 0.9, config.saliency.accumulation).unwrap();
    ensure(dup.iou.iter().all(|v| *v == 1.0), format!("duplicated tasks: {:?}", dup.iou))?;

    let a = Mask::from_bits(vec![true, true, false, false, true, false]);
    let b = Mask::from_bits(vec![false, false, true, true, false, true]);
    let disjoint = layerwise_iou(&[&a, &b]).unwrap();
    ensure(disjoint.iou == vec![0.0], "disjoint masks")?;

    // the reference 2-task suite with a third task for a K-way comparison
    let mut config = ExperimentConfig::default();
    config.suite.tasks.push(SuiteTask::vector("vec", 3));
    let suite = suite_for(&config, 1).unwrap();
    let model = MultitaskModel::new(config.arch_spec(), config.suite.task_specs(), &mut stream(1, Stream::Init)).unwrap();
    let batches = Batcher::draw(&suite.train, 16, 8, &mut stream(1, Stream::Saliency)).unwrap();
    let scores = task_scores(&model, None, Criterion::Static, &batches, config.saliency.accumulation).unwrap();
    let st = disentangled_masks(&model, &scores, 0.9, Scope::Erk, ArbiterKind::OR).unwrap();
    let shared = st.shared_task_masks(&model).unwrap();
    let refs: Vec<&Mask> = shared.values().collect();
    let kway = layerwise_iou(&refs).unwrap();
    for pair in pairwise_iou(&shared).unwrap().values() {
        for (k, p) in kway.iou.iter().zip(&pair.iou) {
            ensure(k <= p, "K-way IoU exceeds a pairwise IoU")?;
        }
    }

    let mut detected = 0;
    let spec = &ExperimentConfig::default().suite;
    for seed in 1..=5 {
        let suite = disparse_core::harness::generate_suite(spec, &mut stream(seed, Stream::Data)).unwrap();
        let model = divergent_model(config.arch_spec(), spec.task_specs(), 2, &mut stream(seed, Stream::Init)).unwrap();
        let batches = Batcher::draw(&suite.train, 64, 8, &mut stream(seed, Stream::Saliency)).unwrap();
        let (_, profile) = shared_mask_iou(&model, &batches, 0.5, config.saliency.accumulation).unwrap();
        if detect_watershed(&profile, DEFAULT_DROP_THRESHOLD) == Some(boundary_layer(2)) {
            detected += 1;
        }
    }
    ensure(detected >= 4, format!("watershed found in {detected} of 5 seeds"))?;
    Ok(format!("duplicate = 1, disjoint = 0, K-way <= pairwise on {} layers, watershed at {} in {detected}/5 seeds", kway.len(), boundary_layer(2)))
}

fn write_all(root: &Path, configs: &[(&str, ExperimentConfig, Option<Checkpoint>)]) {
    for (name, c, ck) in configs {
        write_run(&root.join(name).join("seed-1"), &run(c, 1, ck.as_ref()).unwrap()).unwrap();
    }
}

fn reproducibility() -> Check {
    let pretrained = {
        let mut c = reference(Paradigm::Pretrained, Method::Disparse);
        c.sparsity = 0.5;
        c
    };
    let ck = dense_checkpoint(&pretrained, 1);
    let configs = vec![
        ("static", reference(Paradigm::Static, Method::Disparse), None),
        ("static-random", reference(Paradigm::Static, Method::Random), None),
        ("dynamic", reference(Paradigm::Dynamic, Method::Disparse), None),
        ("pretrained", pretrained, Some(ck)),
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_all(a.path(), &configs);
    write_all(b.path(), &configs);
    let mut compared = 0;
    for (name, _, _) in &configs {
        for file in ["record.json", "masks.json", "checkpoint.json", "config.toml"] {
            let rel = Path::new(name).join("seed-1").join(file);
            let (x, y) = (std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
            ensure(x == y, format!("{} differs", rel.display()))?;
            compared += 1;
        }
    }
    let static_only = |root: &Path| report_paths(&[root.join("static"), root.join("static-random")]).unwrap();
    ensure(static_only(a.path()) == static_only(b.path()), "report tables differ")?;
    Ok(format!("{compared} artifacts and the report table byte-identical across two executions"))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("gradient correctness", gradient_correctness),
        ("mask cardinality", mask_cardinality),
        ("arbiter enumeration", arbiter_enumeration),
        ("single-task reduction", single_task_reduction),
        ("dynamic conservation", dynamic_conservation),
        ("schedule", schedule),
        ("qualitative ordering", qualitative_ordering),
        ("balance", balance),
        ("IoU analysis", iou_analysis),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{n}] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
