//! Training loops for the dense, static, dynamic and pre-trained paradigms.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Method, Paradigm};
use crate::engine::{
    dynamic_step, init_dynamic_masks, prune_with, DynamicSchedule, GrowMethod, OneShotMethod, PruneState,
    UpdateRecord,
};
use crate::error::{Error, Result};
use crate::mask::{LayerId, MaskSet};
use crate::model::{Checkpoint, MultitaskModel};
use crate::rng::{stream, Stream};
use crate::saliency::Criterion;

use super::data::{generate_suite, Batcher, SyntheticTaskSuite};
use super::eval::evaluate;
use super::optim::{Adam, AdamConfig};
use super::record::{LossCurve, ParamCounts, RunOutput, RunRecord, RUN_SCHEMA};

/// Called after every optimizer step with the iteration, the model and the
/// current masks.
pub type Observer<'a> = dyn FnMut(usize, &MultitaskModel, Option<&MaskSet>) + 'a;

fn one_shot_method(config: &ExperimentConfig) -> OneShotMethod {
    match config.method {
        Method::Disparse => OneShotMethod::Disparse(config.arbiter),
        Method::BaselineCombined => OneShotMethod::Combined,
        Method::Random => OneShotMethod::Random,
        Method::Magnitude => OneShotMethod::Magnitude,
    }
}

fn grow_method(config: &ExperimentConfig) -> Result<GrowMethod> {
    Ok(match config.method {
        Method::Disparse => GrowMethod::Disparse(config.arbiter),
        Method::BaselineCombined => GrowMethod::Combined,
        Method::Random => GrowMethod::Random,
        Method::Magnitude => {
            return Err(Error::Config("the dynamic paradigm has no magnitude method".into()));
        }
    })
}

struct Dynamic {
    schedule: DynamicSchedule,
    targets: BTreeMap<LayerId, usize>,
    method: GrowMethod,
    grow_batches: usize,
    batcher: Batcher,
    batch_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
}

struct Loop<'a, 'o> {
    suite: &'a SyntheticTaskSuite,
    config: &'a ExperimentConfig,
    batcher: Batcher,
    rng: ChaCha8Rng,
    observer: Option<&'a mut Observer<'o>>,
}

impl Loop<'_, '_> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        model: &mut MultitaskModel,
        state: &mut Option<PruneState>,
        adam_config: AdamConfig,
        iterations: usize,
        mut dynamic: Option<&mut Dynamic>,
        curve: &mut LossCurve,
        updates: &mut Vec<UpdateRecord>,
    ) -> Result<()> {
        let mut adam = Adam::new(adam_config, model)?;
        let accumulation = self.config.saliency.accumulation;
        for t in 0..iterations {
            if let (Some(d), Some(st)) = (dynamic.as_deref_mut(), state.as_mut()) {
                if d.schedule.is_update(t) {
                    let before = st.masks.clone();
                    let batches: Vec<_> = (0..d.grow_batches)
                        .map(|_| d.batcher.next_batch(&self.suite.train, &mut d.batch_rng))
                        .collect();
                    let rec = dynamic_step(
                        st,
                        model,
                        &d.targets,
                        &d.schedule,
                        d.method,
                        &batches,
                        accumulation,
                        t,
                        &mut d.mask_rng,
                    )?;
                    for ((span, old), (_, new)) in before.layers().zip(st.masks.layers()) {
                        let changed = old.iter().zip(new).enumerate().filter(|(_, (a, b))| a != b).map(|(j, _)| j);
                        adam.reset(&span.id, changed);
                    }
                    updates.push(rec);
                }
            }
            let masks = state.as_ref().map(|s| &s.masks);
            let batch = self.batcher.next_batch(&self.suite.train, &mut self.rng);
            let mut pass = model.masked_forward(masks, &batch.x, None)?;
            let (total, parts) = pass.multitask_loss_parts(&model.tasks, &batch.targets)?;
            pass.backward(total)?;
            if t % self.config.train.log_every == 0 {
                curve.push(
                    t,
                    pass.loss_value(total),
                    parts.iter().map(|(_, n)| pass.loss_value(*n)).collect(),
                );
            }
            let mut grads = BTreeMap::new();
            for id in model.param_ids() {
                grads.insert(id.clone(), pass.param_grad(&id)?.to_vec());
            }
            drop(pass);
            adam.step(model, &grads, adam_config.lr_at(t))?;
            if let Some(obs) = self.observer.as_deref_mut() {
                obs(t, model, masks);
            }
        }
        Ok(())
    }
}

/// Runs one seed of `config`. The pre-trained paradigm prunes `checkpoint`,
/// which must hold a dense model matching the config.
pub fn run(config: &ExperimentConfig, seed: u64, checkpoint: Option<&Checkpoint>) -> Result<RunOutput> {
    run_observed(config, seed, checkpoint, None)
}

pub fn run_observed(
    config: &ExperimentConfig,
    seed: u64,
    checkpoint: Option<&Checkpoint>,
    observer: Option<&mut Observer<'_>>,
) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let suite = generate_suite(&config.suite, &mut stream(seed, Stream::Data))?;
    let tasks = config.suite.task_specs();
    let arch = config.arch_spec();

    let mut model = match config.paradigm {
        Paradigm::Pretrained => {
            let ck = checkpoint.ok_or_else(|| {
                Error::Config("the pretrained paradigm needs a dense checkpoint".into())
            })?;
            let mut sorted = tasks.clone();
            sorted.sort_by(|a, b| a.id.cmp(&b.id));
            if ck.model.arch != arch || ck.model.tasks != sorted {
                return Err(Error::Incompatible(
                    "checkpoint architecture or tasks differ from the config".into(),
                ));
            }
            if ck.masks.as_ref().is_some_and(|m| m.kept() != m.total()) {
                return Err(Error::Checkpoint("pretrained input must be dense".into()));
            }
            ck.model.clone()
        }
        _ => MultitaskModel::new(arch, tasks, &mut stream(seed, Stream::Init))?,
    };

    let mut looper = Loop {
        suite: &suite,
        config,
        batcher: Batcher::new(suite.train.len(), config.train.batch_size)?,
        rng: stream(seed, Stream::Batches),
        observer,
    };
    let saliency_batches = || {
        Batcher::draw(
            &suite.train,
            config.train.batch_size,
            config.saliency.batches,
            &mut stream(seed, Stream::Saliency),
        )
    };
    let mut curve = LossCurve::new(model.task_ids());
    let mut updates = Vec::new();
    let mut state: Option<PruneState> = None;
    let mut calibration = None;
    let (mut dense_val, mut pruned_val) = (None, None);
    let adam = config.optimizer;

    match config.paradigm {
        Paradigm::Dense => {
            looper.run(&mut model, &mut state, adam, config.train.iterations, None, &mut curve, &mut updates)?;
        }
        Paradigm::Static | Paradigm::Pretrained => {
            let criterion = if config.paradigm == Paradigm::Static {
                Criterion::Static
            } else {
                dense_val = Some(evaluate(&model, None, &suite.val)?);
                Criterion::Pretrained
            };
            let (st, report) = prune_with(
                &model,
                criterion,
                one_shot_method(config),
                config.target()?,
                &saliency_batches()?,
                config.saliency.accumulation,
                &config.calibration,
                &mut stream(seed, Stream::Masks),
            )?;
            model.apply_masks(&st.masks)?;
            calibration = report;
            state = Some(st);
            let iterations = if config.paradigm == Paradigm::Static {
                config.train.iterations
            } else {
                pruned_val = Some(evaluate(&model, state.as_ref().map(|s| &s.masks), &suite.val)?);
                config.train.finetune_iterations
            };
            looper.run(&mut model, &mut state, adam, iterations, None, &mut curve, &mut updates)?;
        }
        Paradigm::Dynamic => {
            let mut mask_rng = stream(seed, Stream::Masks);
            let (st, targets) = init_dynamic_masks(&model, config.sparsity, &mut mask_rng)?;
            model.apply_masks(&st.masks)?;
            state = Some(st);
            let mut dynamic = Dynamic {
                schedule: config.dynamic_schedule()?,
                targets,
                method: grow_method(config)?,
                grow_batches: config.schedule.grow_batches,
                batcher: Batcher::new(suite.train.len(), config.train.batch_size)?,
                batch_rng: stream(seed, Stream::Grow),
                mask_rng,
            };
            looper.run(
                &mut model,
                &mut state,
                adam,
                config.train.iterations,
                Some(&mut dynamic),
                &mut curve,
                &mut updates,
            )?;
        }
    }

    let final_val = evaluate(&model, state.as_ref().map(|s| &s.masks), &suite.val)?;
    let record = RunRecord {
        schema: RUN_SCHEMA.to_string(),
        seed,
        config: config.for_seed(seed),
        params: ParamCounts::of(&model)?,
        achieved_sparsity: state.as_ref().map_or(0.0, |s| s.masks.sparsity()),
        internal_sparsity: state
            .as_ref()
            .filter(|s| !s.task_masks.is_empty())
            .map(|s| s.internal_sparsity),
        calibration,
        mask_updates: updates.len(),
        train_loss: curve,
        dense_val,
        pruned_val,
        final_val,
    };
    Ok(RunOutput {
        record,
        model,
        state,
        updates,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// The generated suite of a config and seed, as seen by [`run`].
pub fn suite_for(config: &ExperimentConfig, seed: u64) -> Result<SyntheticTaskSuite> {
    generate_suite(&config.suite, &mut stream(seed, Stream::Data))
}
