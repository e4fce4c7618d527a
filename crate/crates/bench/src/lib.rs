//! Shared fixtures for the benchmarks under `benches/`.

use disparse_core::config::ExperimentConfig;
use disparse_core::harness::{suite_for, Batcher};
use disparse_core::model::{Batch, MultitaskModel};
use disparse_core::rng::{stream, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reference model at initialization plus `batches` minibatches of its suite.
pub fn fixture(batches: usize) -> (MultitaskModel, Vec<Batch>) {
    let mut config = ExperimentConfig::default();
    config.suite.n_train = 1024;
    config.suite.n_val = 16;
    let suite = suite_for(&config, 0).expect("reference suite");
    let model = MultitaskModel::new(config.arch_spec(), config.suite.task_specs(), &mut stream(0, Stream::Init))
        .expect("reference model");
    let batches = Batcher::draw(&suite.train, config.train.batch_size, batches, &mut stream(0, Stream::Saliency))
        .expect("batches");
    (model, batches)
}

pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub fn random_bits(n: usize, seed: u64) -> Vec<bool> {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<bool>()).collect()
}
