//! Binary masks aligned with parameter groups.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Identifier of a task, used as the key of heads, masks and targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn new(s: impl Into<String>) -> Self {
        TaskId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

/// Which parameter group a tensor belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Shared,
    Task(TaskId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Address of one parameter tensor, e.g. `shared.2.weight` or `depth.0.bias`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub group: Group,
    pub layer: usize,
    pub kind: ParamKind,
}

impl LayerId {
    pub fn shared(layer: usize, kind: ParamKind) -> Self {
        LayerId {
            group: Group::Shared,
            layer,
            kind,
        }
    }

    pub fn task(task: &TaskId, layer: usize, kind: ParamKind) -> Self {
        LayerId {
            group: Group::Task(task.clone()),
            layer,
            kind,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let group = match &self.group {
            Group::Shared => "shared",
            Group::Task(t) => t.as_str(),
        };
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        };
        write!(f, "{group}.{}.{kind}", self.layer)
    }
}

impl std::str::FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut parts = s.rsplitn(3, '.');
        let kind = match parts.next() {
            Some("weight") => ParamKind::Weight,
            Some("bias") => ParamKind::Bias,
            _ => return Err(format!("bad layer id `{s}`")),
        };
        let layer = parts
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| format!("bad layer id `{s}`"))?;
        let group = match parts.next() {
            Some("shared") => Group::Shared,
            Some(t) if !t.is_empty() => Group::Task(TaskId::new(t)),
            _ => return Err(format!("bad layer id `{s}`")),
        };
        Ok(LayerId { group, layer, kind })
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Contiguous span of a flat mask or score vector owned by one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub id: LayerId,
    pub start: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered list of layer spans partitioning `[0, total)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskLayout {
    spans: Vec<LayerSpan>,
}

impl MaskLayout {
    pub fn from_sizes(layers: impl IntoIterator<Item = (LayerId, usize)>) -> Self {
        let mut start = 0;
        let spans = layers
            .into_iter()
            .map(|(id, len)| {
                let span = LayerSpan { id, start, len };
                start += len;
                span
            })
            .collect();
        MaskLayout { spans }
    }

    /// Checks that spans tile `[0, total)` in order without gaps or overlap.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut cursor = 0;
        for span in &self.spans {
            if span.start != cursor {
                return Err(Error::Layout(format!(
                    "span {} starts at {} but previous span ends at {cursor}",
                    span.id, span.start
                )));
            }
            cursor += span.len;
        }
        if cursor != total {
            return Err(Error::Layout(format!(
                "spans cover {cursor} entries, expected {total}"
            )));
        }
        Ok(())
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn total(&self) -> usize {
        self.spans.last().map_or(0, |s| s.start + s.len)
    }

    pub fn span(&self, id: &LayerId) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| &s.id == id)
    }

    /// Concatenation of layouts, re-based so offsets stay contiguous.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a MaskLayout>) -> MaskLayout {
        MaskLayout::from_sizes(
            parts
                .into_iter()
                .flat_map(|l| l.spans.iter().map(|s| (s.id.clone(), s.len))),
        )
    }
}

/// Binary keep/prune vector over one parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    layout: MaskLayout,
}

impl Mask {
    pub fn new(bits: Vec<bool>, layout: MaskLayout) -> Result<Self> {
        layout.validate(bits.len())?;
        Ok(Mask { bits, layout })
    }

    pub fn ones(layout: MaskLayout) -> Self {
        Mask {
            bits: vec![true; layout.total()],
            layout,
        }
    }

    pub fn zeros(layout: MaskLayout) -> Self {
        Mask {
            bits: vec![false; layout.total()],
            layout,
        }
    }

    /// Mask with a single unnamed span; handy for analysis of raw bit vectors.
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let layout = MaskLayout::from_sizes([(LayerId::shared(0, ParamKind::Weight), bits.len())]);
        Mask { bits, layout }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn layout(&self) -> &MaskLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Fraction of zero bits; 0 for an empty mask.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            1.0 - self.count_ones() as f64 / self.bits.len() as f64
        }
    }

    pub fn layer_bits(&self, id: &LayerId) -> Option<&[bool]> {
        self.layout.span(id).map(|s| &self.bits[s.range()])
    }

    pub fn layer_bits_mut(&mut self, id: &LayerId) -> Option<&mut [bool]> {
        let range = self.layout.span(id)?.range();
        Some(&mut self.bits[range])
    }

    /// Bits as `f64` 0/1 values for one layer.
    pub fn layer_values(&self, id: &LayerId) -> Option<Vec<f64>> {
        self.layer_bits(id)
            .map(|b| b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect())
    }

    /// Splits off the first `at` bits; both halves keep their layer spans.
    pub fn split_at(&self, at: usize) -> Result<(Mask, Mask)> {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for span in self.layout.spans() {
            if span.start + span.len <= at {
                head.push((span.id.clone(), span.len));
            } else if span.start >= at {
                tail.push((span.id.clone(), span.len));
            } else {
                return Err(Error::Layout(format!("split at {at} cuts through {}", span.id)));
            }
        }
        Ok((
            Mask::new(self.bits[..at].to_vec(), MaskLayout::from_sizes(head))?,
            Mask::new(self.bits[at..].to_vec(), MaskLayout::from_sizes(tail))?,
        ))
    }

    /// Concatenates masks, keeping every span.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Mask> + Clone) -> Mask {
        let layout = MaskLayout::concat(parts.clone().into_iter().map(|m| &m.layout));
        let bits = parts.into_iter().flat_map(|m| m.bits.iter().copied()).collect();
        Mask { bits, layout }
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    layers: MaskLayout,
    bits: String,
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRepr {
            layers: self.layout.clone(),
            bits: self.to_bit_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MaskRepr::deserialize(d)?;
        let bits = repr
            .bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("invalid mask bit `{other}`"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Mask::new(bits, repr.layers).map_err(serde::de::Error::custom)
    }
}

/// Masks for every parameter group of a multitask model: `B^c` and each `B^k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub shared: Mask,
    pub tasks: BTreeMap<TaskId, Mask>,
}

impl MaskSet {
    pub fn group(&self, group: &Group) -> Option<&Mask> {
        match group {
            Group::Shared => Some(&self.shared),
            Group::Task(t) => self.tasks.get(t),
        }
    }

    pub fn group_mut(&mut self, group: &Group) -> Option<&mut Mask> {
        match group {
            Group::Shared => Some(&mut self.shared),
            Group::Task(t) => self.tasks.get_mut(t),
        }
    }

    /// Mask bits of a single layer, if the layer is maskable.
    pub fn layer_bits(&self, id: &LayerId) -> Option<&[bool]> {
        self.group(&id.group).and_then(|m| m.layer_bits(id))
    }

    pub fn layer_bits_mut(&mut self, id: &LayerId) -> Option<&mut [bool]> {
        self.group_mut(&id.group).and_then(|m| m.layer_bits_mut(id))
    }

    pub fn kept(&self) -> usize {
        self.shared.count_ones() + self.tasks.values().map(Mask::count_ones).sum::<usize>()
    }

    pub fn total(&self) -> usize {
        self.shared.len() + self.tasks.values().map(Mask::len).sum::<usize>()
    }

    /// Achieved sparsity over all maskable parameters.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            1.0 - self.kept() as f64 / total as f64
        }
    }

    /// Full-model mask in canonical layout: shared span, then task spans in
    /// task-id order.
    pub fn flatten(&self) -> Mask {
        Mask::concat(std::iter::once(&self.shared).chain(self.tasks.values()))
    }

    /// Every maskable layer with its bits, in canonical order.
    pub fn layers(&self) -> impl Iterator<Item = (&LayerSpan, &[bool])> {
        std::iter::once(&self.shared)
            .chain(self.tasks.values())
            .flat_map(|m| m.layout.spans().iter().map(move |s| (s, &m.bits[s.range()])))
    }
}
