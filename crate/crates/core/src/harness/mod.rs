//! Reference experiment harness: synthetic suites, training loops,
//! evaluation and run records.

pub mod data;
pub mod eval;
pub mod optim;
pub mod record;
pub mod train;
pub mod watershed;

pub use data::{generate_suite, Batcher, RegressionLoss, Split, SuiteSpec, SuiteTask, SyntheticTaskSuite, TaskKind};
pub use eval::{evaluate, Evaluation, TaskMetrics};
pub use optim::{Adam, AdamConfig};
pub use record::{write_run, LossCurve, MaskFile, ParamCounts, RunOutput, RunRecord, MASK_SCHEMA, RUN_SCHEMA};
pub use train::{run, run_observed, suite_for, Observer};
