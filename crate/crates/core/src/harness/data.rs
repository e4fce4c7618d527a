//! Synthetic multitask suites: every task reads a common latent feature map
//! through its own private transform.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::TaskId;
use crate::model::{Batch, LossKind, Target, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionLoss {
    L1,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    Classification {
        classes: usize,
    },
    Regression {
        outputs: usize,
        #[serde(default = "default_regression_loss")]
        loss: RegressionLoss,
    },
    /// Unit-norm vector targets scored by cosine similarity.
    VectorRegression {
        outputs: usize,
    },
}

fn default_regression_loss() -> RegressionLoss {
    RegressionLoss::L1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTask {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default = "one")]
    pub lambda: f64,
    /// Multiplier on regression targets and classification logits.
    #[serde(default = "one")]
    pub target_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl SuiteTask {
    pub fn classification(id: &str, classes: usize) -> Self {
        SuiteTask {
            id: id.into(),
            kind: TaskKind::Classification { classes },
            lambda: 1.0,
            target_scale: 1.0,
        }
    }

    pub fn regression(id: &str, outputs: usize) -> Self {
        SuiteTask {
            id: id.into(),
            kind: TaskKind::Regression {
                outputs,
                loss: RegressionLoss::L1,
            },
            lambda: 1.0,
            target_scale: 1.0,
        }
    }

    pub fn vector(id: &str, outputs: usize) -> Self {
        SuiteTask {
            id: id.into(),
            kind: TaskKind::VectorRegression { outputs },
            lambda: 1.0,
            target_scale: 1.0,
        }
    }

    pub fn spec(&self) -> TaskSpec {
        let (loss, out_dim) = match self.kind {
            TaskKind::Classification { classes } => (LossKind::CrossEntropy, classes),
            TaskKind::Regression { outputs, loss } => (
                match loss {
                    RegressionLoss::L1 => LossKind::L1,
                    RegressionLoss::Mse => LossKind::Mse,
                },
                outputs,
            ),
            TaskKind::VectorRegression { outputs } => (LossKind::Cosine, outputs),
        };
        TaskSpec {
            id: TaskId::new(self.id.clone()),
            loss,
            lambda: self.lambda,
            out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Standard deviation of the target noise.
    pub noise: f64,
    /// Identity nonlinearities, so every target is linear in the input.
    pub linear: bool,
    /// Weight of the common latent map in each task's features, in `[0, 1]`.
    /// The remainder comes from a task-private map of the input.
    pub shared_strength: f64,
    /// Inputs read by the common latent map: the first `shared_inputs`
    /// columns, or every column when 0.
    pub shared_inputs: usize,
    /// Inputs read by each task-private map: a disjoint slice of this width
    /// per task, placed after the shared inputs, or every column when 0.
    /// Columns read by no map are pure distractors.
    pub private_inputs: usize,
    pub tasks: Vec<SuiteTask>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            input_dim: 32,
            latent_dim: 8,
            n_train: 16384,
            n_val: 512,
            noise: 0.1,
            linear: false,
            shared_strength: 0.7,
            shared_inputs: 8,
            private_inputs: 4,
            tasks: vec![SuiteTask::classification("class", 4), SuiteTask::regression("reg", 4)],
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("suite dimensions must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("suite needs training and validation rows".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be nonnegative, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.shared_strength) {
            return Err(Error::Config(format!(
                "shared_strength must lie in [0, 1], got {}",
                self.shared_strength
            )));
        }
        let used = self.shared_inputs + self.private_inputs * self.tasks.len();
        if (self.shared_inputs > 0 || self.private_inputs > 0) && used > self.input_dim {
            return Err(Error::Config(format!(
                "suite reads {used} input columns but input_dim is {}",
                self.input_dim
            )));
        }
        for t in &self.tasks {
            let ok = match t.kind {
                TaskKind::Classification { classes } => classes >= 2,
                TaskKind::Regression { outputs, .. } => outputs >= 1,
                TaskKind::VectorRegression { outputs } => outputs >= 2,
            };
            if !ok {
                return Err(Error::Config(format!("task `{}` has invalid output width", t.id)));
            }
            if !(t.target_scale > 0.0 && t.target_scale.is_finite()) {
                return Err(Error::Config(format!("task `{}` needs a positive target_scale", t.id)));
            }
        }
        crate::model::validate_tasks(&self.task_specs())
    }

    /// Input columns read by the common map.
    pub fn shared_columns(&self) -> std::ops::Range<usize> {
        if self.shared_inputs == 0 {
            0..self.input_dim
        } else {
            0..self.shared_inputs
        }
    }

    /// Input columns read by the private map of the `index`-th task.
    pub fn private_columns(&self, index: usize) -> std::ops::Range<usize> {
        if self.private_inputs == 0 {
            0..self.input_dim
        } else {
            let start = self.shared_inputs + index * self.private_inputs;
            start..start + self.private_inputs
        }
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(SuiteTask::spec).collect()
    }
}

/// Inputs and targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub targets: BTreeMap<TaskId, Target>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(rows),
            targets: self.targets.iter().map(|(t, v)| (t.clone(), v.select_rows(rows))).collect(),
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            targets: self.targets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSuite {
    pub spec: SuiteSpec,
    pub train: Split,
    pub val: Split,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `d × h` Gaussian map whose rows outside `cols` are zero.
fn input_map<R: Rng + ?Sized>(rng: &mut R, d: usize, h: usize, cols: std::ops::Range<usize>) -> Vec<f64> {
    let scale = 1.0 / (cols.len() as f64).sqrt();
    let mut w = vec![0.0; d * h];
    for i in cols {
        for v in &mut w[i * h..(i + 1) * h] {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    w
}

fn matmul(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let av = a[i * inner + k];
            for j in 0..cols {
                out[i * cols + j] += av * b[k * cols + j];
            }
        }
    }
    out
}

/// Draws a suite. Rows are generated together and split afterwards, so the
/// first `n_train` rows train and the remaining `n_val` validate.
pub fn generate_suite<R: Rng + ?Sized>(spec: &SuiteSpec, rng: &mut R) -> Result<SyntheticTaskSuite> {
    spec.validate()?;
    let n = spec.n_train + spec.n_val;
    let (d, h) = (spec.input_dim, spec.latent_dim);
    let act = |v: f64| if spec.linear { v } else { v.tanh() };

    let x = gaussian(rng, n, d, 1.0);
    let w_shared = input_map(rng, d, h, spec.shared_columns());
    let shared: Vec<f64> = matmul(&x, n, d, &w_shared, h).into_iter().map(act).collect();
    let (a, b) = (spec.shared_strength.sqrt(), (1.0 - spec.shared_strength).sqrt());

    let mut targets = BTreeMap::new();
    for (index, task) in spec.tasks.iter().enumerate() {
        let w_private = input_map(rng, d, h, spec.private_columns(index));
        let private: Vec<f64> = matmul(&x, n, d, &w_private, h).into_iter().map(act).collect();
        let z: Vec<f64> = shared.iter().zip(&private).map(|(s, p)| a * s + b * p).collect();
        let mix = gaussian(rng, h, h, 1.0 / (h as f64).sqrt());
        let feats: Vec<f64> = matmul(&z, n, h, &mix, h).into_iter().map(act).collect();
        let out = match task.kind {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { outputs, .. } | TaskKind::VectorRegression { outputs } => outputs,
        };
        let readout = gaussian(rng, h, out, 1.0 / (h as f64).sqrt());
        let raw = matmul(&feats, n, h, &readout, out);
        let noise = gaussian(rng, n, out, spec.noise);
        let target = match task.kind {
            TaskKind::Classification { .. } => {
                let labels = (0..n)
                    .map(|i| {
                        let row = (0..out).map(|j| task.target_scale * raw[i * out + j] + noise[i * out + j]);
                        row.enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
                            .0
                    })
                    .collect();
                Target::Classes(labels)
            }
            TaskKind::Regression { .. } => {
                let vals = raw
                    .iter()
                    .zip(&noise)
                    .map(|(r, e)| task.target_scale * r + e)
                    .collect();
                Target::Values(Tensor::new(vec![n, out], vals)?)
            }
            TaskKind::VectorRegression { .. } => {
                let mut vals: Vec<f64> = raw.iter().zip(&noise).map(|(r, e)| r + e).collect();
                for row in vals.chunks_mut(out) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Target::Values(Tensor::new(vec![n, out], vals)?)
            }
        };
        targets.insert(TaskId::new(task.id.clone()), target);
    }

    let x = Tensor::new(vec![n, d], x)?;
    let train_rows: Vec<usize> = (0..spec.n_train).collect();
    let val_rows: Vec<usize> = (spec.n_train..n).collect();
    let all = Split { x, targets };
    Ok(SyntheticTaskSuite {
        spec: spec.clone(),
        train: all.batch(&train_rows).into(),
        val: all.batch(&val_rows).into(),
    })
}

impl From<Batch> for Split {
    fn from(b: Batch) -> Self {
        Split {
            x: b.x,
            targets: b.targets,
        }
    }
}

/// Epoch-wise shuffled minibatches over a split.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Config("batch size and split length must be positive".into()));
        }
        Ok(Batcher {
            n,
            batch_size: batch_size.min(n),
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn next_rows<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        use rand::seq::SliceRandom;
        if self.pos + self.batch_size > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        rows
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, split: &Split, rng: &mut R) -> Batch {
        let rows = self.next_rows(rng);
        split.batch(&rows)
    }

    /// `count` batches drawn with a fresh shuffle state.
    pub fn draw<R: Rng + ?Sized>(split: &Split, batch_size: usize, count: usize, rng: &mut R) -> Result<Vec<Batch>> {
        let mut b = Batcher::new(split.len(), batch_size)?;
        Ok((0..count).map(|_| b.next_batch(split, rng)).collect())
    }
}
