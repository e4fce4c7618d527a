//! Shared-trunk multitask perceptron with explicit parameter groups.
//!
//! Parameters are split into the shared trunk (`Θ^c`) and one head per task
//! (`Θ^k`). Every tensor is addressed by a [`LayerId`]; masks cover the
//! maskable tensors of a group (weights, plus biases when `mask_biases` is
//! set) in canonical layer order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mask::{Group, LayerId, Mask, MaskLayout, MaskSet, ParamKind, TaskId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Cosine,
    L1,
    Mse,
}

/// One task: its loss, weight `λ^k` and output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub loss: LossKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Number of classes for cross-entropy, output width otherwise.
    pub out_dim: usize,
}

fn default_lambda() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, loss: LossKind, out_dim: usize) -> Self {
        TaskSpec {
            id: TaskId::new(id),
            loss,
            lambda: 1.0,
            out_dim,
        }
    }
}

/// Checks the task-list invariants: unique ids, `λ ≥ 0`, some `λ > 0`.
pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in tasks {
        if !seen.insert(&t.id) {
            return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(Error::Config(format!("task `{}` has invalid lambda {}", t.id, t.lambda)));
        }
        if t.out_dim == 0 || (t.loss == LossKind::CrossEntropy && t.out_dim < 2) {
            return Err(Error::Config(format!("task `{}` has invalid output width", t.id)));
        }
    }
    if tasks.iter().all(|t| t.lambda == 0.0) {
        return Err(Error::Config("every task has lambda = 0".into()));
    }
    Ok(())
}

/// Supervision for one task on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(c) => c.len(),
            Target::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, rows: &[usize]) -> Target {
        match self {
            Target::Classes(c) => Target::Classes(rows.iter().map(|&r| c[r]).collect()),
            Target::Values(v) => Target::Values(v.select_rows(rows)),
        }
    }
}

/// Inputs and per-task targets for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: BTreeMap<TaskId, Target>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Architecture of the reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Output width of each fully-connected trunk layer.
    pub trunk_widths: Vec<usize>,
    /// Hidden width of each two-layer task head.
    pub head_hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Biases are exempt from masking unless this is set.
    #[serde(default)]
    pub mask_biases: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 32,
            trunk_widths: vec![32; 4],
            head_hidden: 32,
            activation: Activation::Relu,
            mask_biases: false,
        }
    }
}

/// Fully-connected layer: `y = x W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("linear init"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn param(&self, kind: ParamKind) -> &Tensor {
        match kind {
            ParamKind::Weight => &self.weight,
            ParamKind::Bias => &self.bias,
        }
    }

    fn param_mut(&mut self, kind: ParamKind) -> &mut Tensor {
        match kind {
            ParamKind::Weight => &mut self.weight,
            ParamKind::Bias => &mut self.bias,
        }
    }
}

/// Shared trunk plus one head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskModel {
    pub arch: ArchSpec,
    pub tasks: Vec<TaskSpec>,
    pub trunk: Vec<Linear>,
    pub heads: BTreeMap<TaskId, Vec<Linear>>,
}

impl MultitaskModel {
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, tasks: Vec<TaskSpec>, rng: &mut R) -> Result<Self> {
        validate_tasks(&tasks)?;
        if arch.input_dim == 0 || arch.head_hidden == 0 || arch.trunk_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut trunk = Vec::with_capacity(arch.trunk_widths.len());
        let mut width = arch.input_dim;
        for &w in &arch.trunk_widths {
            trunk.push(Linear::init(width, w, rng));
            width = w;
        }
        let mut sorted = tasks.clone();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut heads = BTreeMap::new();
        for t in &sorted {
            let head = vec![
                Linear::init(width, arch.head_hidden, rng),
                Linear::init(arch.head_hidden, t.out_dim, rng),
            ];
            heads.insert(t.id.clone(), head);
        }
        Ok(MultitaskModel {
            arch,
            tasks: sorted,
            trunk,
            heads,
        })
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.heads.keys().cloned().collect()
    }

    pub fn task(&self, id: &TaskId) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    fn layers(&self, group: &Group) -> Result<&[Linear]> {
        match group {
            Group::Shared => Ok(&self.trunk),
            Group::Task(t) => self
                .heads
                .get(t)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::UnknownTask(t.to_string())),
        }
    }

    /// Every parameter tensor in canonical order: trunk, then heads by task id.
    pub fn param_ids(&self) -> Vec<LayerId> {
        let mut ids = Vec::new();
        for group in self.groups() {
            let n = self.layers(&group).map_or(0, <[Linear]>::len);
            for layer in 0..n {
                for kind in [ParamKind::Weight, ParamKind::Bias] {
                    ids.push(LayerId {
                        group: group.clone(),
                        layer,
                        kind,
                    });
                }
            }
        }
        ids
    }

    pub fn groups(&self) -> Vec<Group> {
        std::iter::once(Group::Shared)
            .chain(self.heads.keys().cloned().map(Group::Task))
            .collect()
    }

    pub fn param(&self, id: &LayerId) -> Result<&Tensor> {
        self.layers(&id.group)?
            .get(id.layer)
            .map(|l| l.param(id.kind))
            .ok_or_else(|| Error::Layout(format!("no such layer {id}")))
    }

    pub fn param_mut(&mut self, id: &LayerId) -> Result<&mut Tensor> {
        let layers = match &id.group {
            Group::Shared => &mut self.trunk,
            Group::Task(t) => self
                .heads
                .get_mut(t)
                .ok_or_else(|| Error::UnknownTask(t.to_string()))?,
        };
        layers
            .get_mut(id.layer)
            .map(|l| l.param_mut(id.kind))
            .ok_or_else(|| Error::Layout(format!("no such layer {id}")))
    }

    pub fn is_maskable(&self, id: &LayerId) -> bool {
        id.kind == ParamKind::Weight || self.arch.mask_biases
    }

    /// `(fan_in, fan_out)` of the layer owning a parameter tensor. Bias
    /// vectors report `(1, fan_out)`.
    pub fn fans(&self, id: &LayerId) -> Result<(usize, usize)> {
        let layer = self
            .layers(&id.group)?
            .get(id.layer)
            .ok_or_else(|| Error::Layout(format!("no such layer {id}")))?;
        Ok(match id.kind {
            ParamKind::Weight => (layer.fan_in(), layer.fan_out()),
            ParamKind::Bias => (1, layer.fan_out()),
        })
    }

    /// Layout of the maskable tensors of one group.
    pub fn group_layout(&self, group: &Group) -> Result<MaskLayout> {
        let layers = self.layers(group)?;
        let mut sizes = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            for kind in [ParamKind::Weight, ParamKind::Bias] {
                let id = LayerId {
                    group: group.clone(),
                    layer: i,
                    kind,
                };
                if self.is_maskable(&id) {
                    sizes.push((id, l.param(kind).len()));
                }
            }
        }
        Ok(MaskLayout::from_sizes(sizes))
    }

    /// Layout of `Θ^{kc}`: shared span followed by task `k`'s span.
    pub fn task_scope_layout(&self, task: &TaskId) -> Result<MaskLayout> {
        let shared = self.group_layout(&Group::Shared)?;
        let private = self.group_layout(&Group::Task(task.clone()))?;
        Ok(MaskLayout::concat([&shared, &private]))
    }

    /// Layout of every maskable tensor: shared, then each head by task id.
    pub fn full_layout(&self) -> Result<MaskLayout> {
        let parts = self
            .groups()
            .iter()
            .map(|g| self.group_layout(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskLayout::concat(parts.iter()))
    }

    /// `m_c`: maskable shared parameter count.
    pub fn m_c(&self) -> usize {
        self.group_layout(&Group::Shared).map_or(0, |l| l.total())
    }

    /// `m_k`: maskable private parameter count of one task.
    pub fn m_k(&self, task: &TaskId) -> Result<usize> {
        Ok(self.group_layout(&Group::Task(task.clone()))?.total())
    }

    /// `m = m_c + Σ m_k` over maskable parameters.
    pub fn m(&self) -> usize {
        self.full_layout().map_or(0, |l| l.total())
    }

    /// Total parameter count including unmaskable tensors.
    pub fn num_params(&self) -> usize {
        self.param_ids()
            .iter()
            .map(|id| self.param(id).map_or(0, Tensor::len))
            .sum()
    }

    /// Parameter values concatenated along `layout`.
    pub fn flat_values(&self, layout: &MaskLayout) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(layout.total());
        for span in layout.spans() {
            out.extend_from_slice(self.param(&span.id)?.data());
        }
        Ok(out)
    }

    /// Writes a flat vector back along `layout`.
    pub fn set_flat_values(&mut self, layout: &MaskLayout, values: &[f64]) -> Result<()> {
        layout.validate(values.len())?;
        for span in layout.spans() {
            self.param_mut(&span.id)?
                .data_mut()
                .copy_from_slice(&values[span.range()]);
        }
        Ok(())
    }

    /// All-ones masks over every group.
    pub fn dense_masks(&self) -> Result<MaskSet> {
        let shared = Mask::ones(self.group_layout(&Group::Shared)?);
        let tasks = self
            .heads
            .keys()
            .map(|t| Ok((t.clone(), Mask::ones(self.group_layout(&Group::Task(t.clone()))?))))
            .collect::<Result<_>>()?;
        Ok(MaskSet { shared, tasks })
    }

    /// Checks that a mask set has exactly this model's group layouts.
    pub fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        let check = |group: &Group, mask: Option<&Mask>| -> Result<()> {
            let layout = self.group_layout(group)?;
            let name = match group {
                Group::Shared => "shared".to_string(),
                Group::Task(t) => t.to_string(),
            };
            let mask = mask.ok_or_else(|| Error::MaskLength {
                group: name.clone(),
                expected: layout.total(),
                actual: 0,
            })?;
            if mask.len() != layout.total() {
                return Err(Error::MaskLength {
                    group: name,
                    expected: layout.total(),
                    actual: mask.len(),
                });
            }
            if mask.layout() != &layout {
                return Err(Error::Layout(format!("mask spans for `{name}` do not match model")));
            }
            Ok(())
        };
        check(&Group::Shared, Some(&masks.shared))?;
        for t in self.heads.keys() {
            check(&Group::Task(t.clone()), masks.tasks.get(t))?;
        }
        if masks.tasks.len() != self.heads.len() {
            return Err(Error::Layout("mask set has tasks the model does not".into()));
        }
        Ok(())
    }

    /// Zeroes every masked-out parameter in place.
    pub fn apply_masks(&mut self, masks: &MaskSet) -> Result<()> {
        self.check_masks(masks)?;
        for (span, bits) in masks.layers() {
            let data = self.param_mut(&span.id)?.data_mut();
            for (v, &keep) in data.iter_mut().zip(bits) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Records the forward pass on a fresh tape. Each parameter becomes a
    /// gradient-requiring leaf; maskable parameters are multiplied by their
    /// constant 0/1 mask and the product is retained as the effective weight.
    /// `only` restricts which heads are evaluated.
    pub fn masked_forward(
        &self,
        masks: Option<&MaskSet>,
        input: &Tensor,
        only: Option<&[TaskId]>,
    ) -> Result<ForwardPass> {
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        if input.shape().len() != 2 || input.shape()[1] != self.arch.input_dim {
            return Err(crate::error::AutogradError::ShapeMismatch {
                op: "input",
                lhs: input.shape().to_vec(),
                rhs: vec![input.rows(), self.arch.input_dim],
            }
            .into());
        }
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        let x = tape.constant(input.clone());

        let mut h = x;
        for (i, _) in self.trunk.iter().enumerate() {
            h = self.linear(&mut tape, &mut params, masks, Group::Shared, i, h)?;
            h = self.activate(&mut tape, h)?;
        }
        let trunk_out = h;

        let mut outputs = BTreeMap::new();
        for (task, head) in &self.heads {
            if only.is_some_and(|o| !o.contains(task)) {
                continue;
            }
            let mut h = trunk_out;
            for i in 0..head.len() {
                h = self.linear(&mut tape, &mut params, masks, Group::Task(task.clone()), i, h)?;
                if i + 1 < head.len() {
                    h = self.activate(&mut tape, h)?;
                }
            }
            outputs.insert(task.clone(), h);
        }
        Ok(ForwardPass {
            tape,
            outputs,
            params,
        })
    }

    fn activate(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        Ok(match self.arch.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
        })
    }

    fn linear(
        &self,
        tape: &mut Tape,
        params: &mut BTreeMap<LayerId, ParamNodes>,
        masks: Option<&MaskSet>,
        group: Group,
        layer: usize,
        input: NodeId,
    ) -> Result<NodeId> {
        let mut effective = [None, None];
        for (slot, kind) in [ParamKind::Weight, ParamKind::Bias].into_iter().enumerate() {
            let id = LayerId {
                group: group.clone(),
                layer,
                kind,
            };
            let value = self.param(&id)?.clone();
            let shape = value.shape().to_vec();
            let leaf = tape.param(value);
            let eff = match masks.and_then(|m| m.layer_bits(&id)) {
                Some(bits) => {
                    let mask = Tensor::new(shape, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
                    let m = tape.constant(mask);
                    let e = tape.mul(leaf, m)?;
                    tape.retain_grad(e);
                    e
                }
                None => leaf,
            };
            params.insert(id, ParamNodes { leaf, effective: eff });
            effective[slot] = Some(eff);
        }
        let h = tape.matmul(input, effective[0].expect("weight node"))?;
        Ok(tape.add_bias(h, effective[1].expect("bias node"))?)
    }

    /// Evaluates every head and returns the prediction values.
    pub fn predict(&self, masks: Option<&MaskSet>, input: &Tensor) -> Result<BTreeMap<TaskId, Tensor>> {
        let pass = self.masked_forward(masks, input, None)?;
        Ok(pass
            .outputs
            .iter()
            .map(|(t, &n)| (t.clone(), pass.tape.value(n).clone()))
            .collect())
    }
}

/// Tape nodes of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    /// The raw parameter `θ`.
    pub leaf: NodeId,
    /// `θ ⊙ b` for maskable tensors, `θ` otherwise.
    pub effective: NodeId,
}

/// A recorded forward pass: the tape, each head's output node and the nodes
/// of every parameter.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub outputs: BTreeMap<TaskId, NodeId>,
    pub params: BTreeMap<LayerId, ParamNodes>,
}

impl ForwardPass {
    /// `ℓ^k` for one task, as a scalar node.
    pub fn task_loss(&mut self, spec: &TaskSpec, target: &Target) -> Result<NodeId> {
        let pred = *self
            .outputs
            .get(&spec.id)
            .ok_or_else(|| Error::UnknownTask(spec.id.to_string()))?;
        loss_node(&mut self.tape, pred, spec.loss, target)
    }

    /// `Σ_k λ^k ℓ^k` over `tasks`.
    pub fn multitask_loss(
        &mut self,
        tasks: &[TaskSpec],
        targets: &BTreeMap<TaskId, Target>,
    ) -> Result<NodeId> {
        Ok(self.multitask_loss_parts(tasks, targets)?.0)
    }

    /// Like [`ForwardPass::multitask_loss`] but also returns each unweighted
    /// `ℓ^k` node.
    pub fn multitask_loss_parts(
        &mut self,
        tasks: &[TaskSpec],
        targets: &BTreeMap<TaskId, Target>,
    ) -> Result<(NodeId, Vec<(TaskId, NodeId)>)> {
        if tasks.is_empty() {
            return Err(Error::Config("multitask loss over zero tasks".into()));
        }
        let mut total: Option<NodeId> = None;
        let mut parts = Vec::with_capacity(tasks.len());
        for spec in tasks {
            let target = targets
                .get(&spec.id)
                .ok_or_else(|| Error::MissingTarget(spec.id.to_string()))?;
            let l = self.task_loss(spec, target)?;
            parts.push((spec.id.clone(), l));
            let weighted = self.tape.scale(l, spec.lambda)?;
            total = Some(match total {
                None => weighted,
                Some(acc) => self.tape.add(acc, weighted)?,
            });
        }
        Ok((total.expect("nonempty task list"), parts))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        Ok(self.tape.backward_scalar(loss)?)
    }

    /// Gradient with respect to the effective (masked) parameter `θ ⊙ b`.
    /// For masked-out entries this is the gradient the weight would receive
    /// if it were reactivated at zero.
    pub fn effective_grad(&self, id: &LayerId) -> Result<&[f64]> {
        let nodes = self
            .params
            .get(id)
            .ok_or_else(|| Error::Layout(format!("no parameter {id} on tape")))?;
        self.tape
            .grad(nodes.effective)
            .ok_or_else(|| Error::Layout(format!("no gradient recorded for {id}")))
    }

    /// Gradient with respect to the raw parameter `θ` (zero where masked).
    pub fn param_grad(&self, id: &LayerId) -> Result<&[f64]> {
        let nodes = self
            .params
            .get(id)
            .ok_or_else(|| Error::Layout(format!("no parameter {id} on tape")))?;
        self.tape
            .grad(nodes.leaf)
            .ok_or_else(|| Error::Layout(format!("no gradient recorded for {id}")))
    }

    /// Effective gradients concatenated along `layout`.
    pub fn flat_effective_grad(&self, layout: &MaskLayout) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(layout.total());
        for span in layout.spans() {
            out.extend_from_slice(self.effective_grad(&span.id)?);
        }
        Ok(out)
    }

    pub fn loss_value(&self, node: NodeId) -> f64 {
        self.tape.value(node).item()
    }
}

fn loss_node(tape: &mut Tape, pred: NodeId, kind: LossKind, target: &Target) -> Result<NodeId> {
    Ok(match (kind, target) {
        (LossKind::CrossEntropy, Target::Classes(labels)) => tape.softmax_cross_entropy(pred, labels)?,
        (LossKind::Mse, Target::Values(t)) => tape.mse(pred, t)?,
        (LossKind::L1, Target::Values(t)) => tape.l1(pred, t)?,
        (LossKind::Cosine, Target::Values(t)) => tape.cosine_loss(pred, t)?,
        (kind, _) => {
            return Err(Error::Config(format!("target type does not match loss {kind:?}")));
        }
    })
}

/// Multitask loss `Σ_k λ^k ℓ^k` evaluated without keeping the tape.
pub fn multitask_loss_value(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    input: &Tensor,
    targets: &BTreeMap<TaskId, Target>,
) -> Result<f64> {
    let mut pass = model.masked_forward(masks, input, None)?;
    let l = pass.multitask_loss(&model.tasks, targets)?;
    Ok(pass.loss_value(l))
}

/// Per-task loss `ℓ^k` (λ = 1) evaluated without keeping the tape.
pub fn per_task_loss_value(
    model: &MultitaskModel,
    masks: Option<&MaskSet>,
    input: &Tensor,
    targets: &BTreeMap<TaskId, Target>,
    task: &TaskId,
) -> Result<f64> {
    let spec = model.task(task)?.clone();
    let target = targets
        .get(task)
        .ok_or_else(|| Error::MissingTarget(task.to_string()))?;
    let mut pass = model.masked_forward(masks, input, Some(std::slice::from_ref(task)))?;
    let l = pass.task_loss(&spec, target)?;
    Ok(pass.loss_value(l))
}

const CHECKPOINT_SCHEMA: &str = "disparse-checkpoint/v1";

/// Model parameters and (optionally) masks, serialized as JSON with
/// shortest round-trip float formatting so values reload bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub model: MultitaskModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskSet>,
}

impl Checkpoint {
    pub fn new(model: MultitaskModel, masks: Option<MaskSet>) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            model,
            masks,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported schema `{}`", ck.schema)));
        }
        ck.validate()?;
        Ok(ck)
    }

    /// Structural checks: tensor shapes chain, heads match tasks, masks align.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        validate_tasks(&m.tasks)?;
        let mut width = m.arch.input_dim;
        for (i, l) in m.trunk.iter().enumerate() {
            if l.fan_in() != width || l.bias.len() != l.fan_out() {
                return Err(Error::Checkpoint(format!("trunk layer {i} has inconsistent shape")));
            }
            width = l.fan_out();
        }
        if m.heads.len() != m.tasks.len() {
            return Err(Error::Checkpoint("head count differs from task count".into()));
        }
        for t in &m.tasks {
            let head = m
                .heads
                .get(&t.id)
                .ok_or_else(|| Error::Checkpoint(format!("missing head for `{}`", t.id)))?;
            let mut w = width;
            for l in head {
                if l.fan_in() != w || l.bias.len() != l.fan_out() {
                    return Err(Error::Checkpoint(format!("head `{}` has inconsistent shape", t.id)));
                }
                w = l.fan_out();
            }
            if w != t.out_dim {
                return Err(Error::Checkpoint(format!("head `{}` output width mismatch", t.id)));
            }
        }
        if let Some(masks) = &self.masks {
            m.check_masks(masks)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (MultitaskModel, Tensor, BTreeMap<TaskId, Target>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arch = ArchSpec {
            input_dim: 3,
            trunk_widths: vec![4, 4],
            head_hidden: 3,
            ..Default::default()
        };
        let tasks = vec![
            TaskSpec::new("a", LossKind::Mse, 2),
            TaskSpec::new("b", LossKind::CrossEntropy, 3),
        ];
        let model = MultitaskModel::new(arch, tasks, &mut rng).unwrap();
        let x = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut targets = BTreeMap::new();
        targets.insert(
            TaskId::new("a"),
            Target::Values(Tensor::matrix(5, 2, (0..10).map(|i| (i as f64).cos()).collect()).unwrap()),
        );
        targets.insert(TaskId::new("b"), Target::Classes(vec![0, 1, 2, 1, 0]));
        (model, x, targets)
    }

    #[test]
    fn parameter_counts_partition() {
        let (model, _, _) = toy();
        assert_eq!(model.m_c(), 3 * 4 + 4 * 4);
        assert_eq!(model.m_k(&"a".into()).unwrap(), 4 * 3 + 3 * 2);
        assert_eq!(model.m_k(&"b".into()).unwrap(), 4 * 3 + 3 * 3);
        assert_eq!(model.m(), 28 + 18 + 21);
        assert!(model.m_k(&"zzz".into()).is_err());
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let (mut model, _, _) = toy();
        let layout = model.full_layout().unwrap();
        let before = model.clone();
        let flat = model.flat_values(&layout).unwrap();
        model.set_flat_values(&layout, &flat).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn all_ones_mask_matches_unmasked_forward() {
        let (model, x, _) = toy();
        let masks = model.dense_masks().unwrap();
        assert_eq!(model.predict(Some(&masks), &x).unwrap(), model.predict(None, &x).unwrap());
    }

    #[test]
    fn zero_trunk_mask_gives_constant_head_response() {
        let (model, x, _) = toy();
        let mut masks = model.dense_masks().unwrap();
        masks.shared.bits_mut().iter_mut().for_each(|b| *b = false);
        let preds = model.predict(Some(&masks), &x).unwrap();
        // biases are zero at init, so the trunk output is zero for every row
        let zero_in = Tensor::zeros(&[1, 3]);
        let reference = model.predict(Some(&masks), &zero_in).unwrap();
        for (t, p) in &preds {
            for r in 0..p.rows() {
                assert_eq!(p.row(r), reference[t].row(0));
            }
        }
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let (model, x, _) = toy();
        let mut masks = model.dense_masks().unwrap();
        masks.shared = Mask::from_bits(vec![true; 3]);
        assert!(matches!(
            model.masked_forward(Some(&masks), &x, None),
            Err(Error::MaskLength { .. })
        ));
    }

    #[test]
    fn weighted_losses() {
        let (mut model, x, targets) = toy();
        let a = per_task_loss_value(&model, None, &x, &targets, &"a".into()).unwrap();
        let b = per_task_loss_value(&model, None, &x, &targets, &"b".into()).unwrap();
        let total = multitask_loss_value(&model, None, &x, &targets).unwrap();
        assert!((total - (a + b)).abs() < 1e-14);
        model.tasks[0].lambda = 2.0;
        model.tasks[1].lambda = 0.0;
        let total = multitask_loss_value(&model, None, &x, &targets).unwrap();
        assert!((total - 2.0 * a).abs() < 1e-14);
    }

    #[test]
    fn missing_target_rejected() {
        let (model, x, mut targets) = toy();
        targets.remove(&TaskId::new("b"));
        assert!(matches!(
            multitask_loss_value(&model, None, &x, &targets),
            Err(Error::MissingTarget(_))
        ));
        assert!(per_task_loss_value(&model, None, &x, &targets, &"nope".into()).is_err());
    }

    #[test]
    fn mse_zero_residual() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap());
        let l = loss_node(
            &mut tape,
            p,
            LossKind::Mse,
            &Target::Values(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (model, _, _) = toy();
        let mut masks = model.dense_masks().unwrap();
        masks.shared.bits_mut()[2] = false;
        let ck = Checkpoint::new(model, Some(masks));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let a = ck.model.flat_values(&ck.model.full_layout().unwrap()).unwrap();
        let b = back.model.flat_values(&back.model.full_layout().unwrap()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let (mut model, _, _) = toy();
        model.trunk[1] = Linear {
            weight: Tensor::zeros(&[5, 4]),
            bias: Tensor::zeros(&[4]),
        };
        let ck = Checkpoint::new(model, None);
        assert!(matches!(Checkpoint::from_json(&ck.to_json()), Err(Error::Checkpoint(_))));
    }
}
