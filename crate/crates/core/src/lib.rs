//! Disentangled sparsification of multitask networks: per-task saliency,
//! arbiter-merged shared masks, static, dynamic and pre-trained pruning, and
//! mask-based task-relatedness analysis.

pub mod analysis;
pub mod arbiter;
pub mod autograd;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod mask;
pub mod model;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use analysis::{detect_watershed, layerwise_iou, pairwise_iou, IoUProfile};
pub use arbiter::{merge, ArbiterKind, ArbiterRule};
pub use config::{ExperimentConfig, Method, Paradigm};
pub use engine::{PruneState, Scope, SparsityTarget};
pub use error::{Error, Result};
pub use mask::{Group, LayerId, Mask, MaskLayout, MaskSet, ParamKind, TaskId};
pub use model::{ArchSpec, Checkpoint, MultitaskModel, TaskSpec};
pub use saliency::{Accumulation, Criterion, SaliencyVector};
pub use tensor::Tensor;
