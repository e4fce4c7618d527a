//! Merging per-task shared masks into one shared mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, MaskSet, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArbiterRule {
    /// Keep a connection if any task keeps it.
    Or,
    /// Keep a connection if more than half of the tasks keep it.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbiterKind {
    pub rule: ArbiterRule,
    /// Majority only: keep on exactly `K/2` votes (even `K`).
    #[serde(default = "default_tie_keep")]
    pub tie_keep: bool,
}

fn default_tie_keep() -> bool {
    true
}

impl ArbiterKind {
    pub const OR: ArbiterKind = ArbiterKind {
        rule: ArbiterRule::Or,
        tie_keep: true,
    };

    pub fn majority(tie_keep: bool) -> Self {
        ArbiterKind {
            rule: ArbiterRule::Majority,
            tie_keep,
        }
    }

    /// Checks that the rule is defined for `k` tasks.
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Arbiter("no masks to merge".into()));
        }
        if self.rule == ArbiterRule::Majority && k < 3 {
            return Err(Error::Arbiter(format!("majority vote needs at least 3 tasks, got {k}")));
        }
        Ok(())
    }

    fn keeps(&self, votes: usize, k: usize) -> bool {
        match self.rule {
            ArbiterRule::Or => votes > 0,
            ArbiterRule::Majority => 2 * votes > k || (self.tie_keep && 2 * votes == k),
        }
    }
}

impl Default for ArbiterKind {
    fn default() -> Self {
        ArbiterKind::OR
    }
}

/// Element-wise merge of `K` equally long masks. The result takes the
/// layout of the first mask.
pub fn merge(masks: &[&Mask], kind: ArbiterKind) -> Result<Mask> {
    kind.validate(masks.len())?;
    let n = masks[0].len();
    if let Some(bad) = masks.iter().find(|m| m.len() != n) {
        return Err(Error::Arbiter(format!(
            "mask lengths differ: {n} vs {}",
            bad.len()
        )));
    }
    let k = masks.len();
    let bits = (0..n)
        .map(|j| {
            let votes = masks.iter().filter(|m| m.bits()[j]).count();
            kind.keeps(votes, k)
        })
        .collect();
    Mask::new(bits, masks[0].layout().clone())
}

/// Full-model mask from the merged shared mask and each task's private
/// mask. Rejects masks whose layer spans overlap.
pub fn assemble_full_mask(shared: Mask, private: BTreeMap<TaskId, Mask>) -> Result<MaskSet> {
    let mut seen = std::collections::BTreeSet::new();
    for mask in std::iter::once(&shared).chain(private.values()) {
        for span in mask.layout().spans() {
            if !seen.insert(span.id.clone()) {
                return Err(Error::Layout(format!("layer {} appears in two spans", span.id)));
            }
        }
    }
    Ok(MaskSet {
        shared,
        tasks: private,
    })
}

/// Inverse of [`assemble_full_mask`] on the flattened canonical layout.
pub fn split_full_mask(full: &Mask, shared_len: usize, task_lens: &[(TaskId, usize)]) -> Result<MaskSet> {
    let expected = shared_len + task_lens.iter().map(|(_, n)| n).sum::<usize>();
    if full.len() != expected {
        return Err(Error::Layout(format!(
            "full mask has {} bits, spans cover {expected}",
            full.len()
        )));
    }
    let (shared, mut rest) = full.split_at(shared_len)?;
    let mut tasks = BTreeMap::new();
    for (t, n) in task_lens {
        let (mine, tail) = rest.split_at(*n)?;
        tasks.insert(t.clone(), mine);
        rest = tail;
    }
    Ok(MaskSet { shared, tasks })
}

/// Checks that private masks cover exactly the model's tasks and that every
/// mask matches its expected length; used before assembling.
pub fn check_spans(
    shared: &Mask,
    private: &BTreeMap<TaskId, Mask>,
    shared_len: usize,
    task_lens: &BTreeMap<TaskId, usize>,
) -> Result<()> {
    if shared.len() != shared_len {
        return Err(Error::MaskLength {
            group: "shared".into(),
            expected: shared_len,
            actual: shared.len(),
        });
    }
    for (t, n) in task_lens {
        let m = private
            .get(t)
            .ok_or_else(|| Error::Layout(format!("missing private span for `{t}`")))?;
        if m.len() != *n {
            return Err(Error::MaskLength {
                group: t.to_string(),
                expected: *n,
                actual: m.len(),
            });
        }
    }
    if let Some(extra) = private.keys().find(|t| !task_lens.contains_key(*t)) {
        return Err(Error::Layout(format!("unexpected private span for `{extra}`")));
    }
    Ok(())
}
