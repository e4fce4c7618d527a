//! Task relatedness read off the masks: layer-wise IoU of the tasks' shared
//! masks and detection of the layer where it collapses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerId, Mask, TaskId};

pub const DEFAULT_DROP_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUProfile {
    pub layer_ids: Vec<LayerId>,
    pub iou: Vec<f64>,
    /// Layers where no task keeps anything; their IoU is reported as 1.
    pub degenerate: Vec<bool>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watershed_layer: Option<LayerId>,
}

impl IoUProfile {
    pub fn len(&self) -> usize {
        self.iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iou.is_empty()
    }

    pub fn with_watershed(mut self, drop_threshold: f64) -> Self {
        self.watershed_layer = detect_watershed(&self, drop_threshold);
        self
    }

    /// Two-column table `layer_id<TAB>iou`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer_id\tiou\n");
        for (id, v) in self.layer_ids.iter().zip(&self.iou) {
            out.push_str(&format!("{id}\t{v}\n"));
        }
        out
    }
}

fn check_same_layout(masks: &[&Mask]) -> Result<()> {
    let first = masks[0];
    for m in &masks[1..] {
        if m.len() != first.len() {
            return Err(Error::Layout(format!("mask lengths differ: {} vs {}", first.len(), m.len())));
        }
        if m.layout() != first.layout() {
            return Err(Error::Layout("masks cover different layers".into()));
        }
    }
    Ok(())
}

/// K-way IoU `|∩ keep| / |∪ keep|` per layer of the masks' common layout.
pub fn layerwise_iou(masks: &[&Mask]) -> Result<IoUProfile> {
    if masks.len() < 2 {
        return Err(Error::Layout(format!("IoU needs at least two masks, got {}", masks.len())));
    }
    check_same_layout(masks)?;
    let layout = masks[0].layout();
    let mut profile = IoUProfile {
        layer_ids: Vec::with_capacity(layout.spans().len()),
        iou: Vec::with_capacity(layout.spans().len()),
        degenerate: Vec::with_capacity(layout.spans().len()),
        k: masks.len(),
        watershed_layer: None,
    };
    for span in layout.spans() {
        let (mut inter, mut union) = (0usize, 0usize);
        for j in span.range() {
            let kept = masks.iter().filter(|m| m.bits()[j]).count();
            if kept == masks.len() {
                inter += 1;
            }
            if kept > 0 {
                union += 1;
            }
        }
        profile.layer_ids.push(span.id.clone());
        profile.degenerate.push(union == 0);
        profile.iou.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    Ok(profile)
}

/// IoU profile of every unordered task pair.
pub fn pairwise_iou(masks: &BTreeMap<TaskId, Mask>) -> Result<BTreeMap<(TaskId, TaskId), IoUProfile>> {
    let entries: Vec<(&TaskId, &Mask)> = masks.iter().collect();
    let mut out = BTreeMap::new();
    for (i, (a, ma)) in entries.iter().enumerate() {
        for (b, mb) in &entries[i + 1..] {
            out.insert(((*a).clone(), (*b).clone()), layerwise_iou(&[ma, mb])?);
        }
    }
    Ok(out)
}

/// Index of the first layer `l + 1` with `iou[l] − iou[l + 1] ≥ drop_threshold`.
pub fn watershed_index(profile: &IoUProfile, drop_threshold: f64) -> Option<usize> {
    profile
        .iou
        .windows(2)
        .position(|w| w[0] - w[1] >= drop_threshold)
        .map(|l| l + 1)
}

pub fn detect_watershed(profile: &IoUProfile, drop_threshold: f64) -> Option<LayerId> {
    watershed_index(profile, drop_threshold).map(|i| profile.layer_ids[i].clone())
}

/// Kept fraction of each layer.
pub fn density_profile(mask: &Mask) -> Vec<(LayerId, f64)> {
    mask.layout()
        .spans()
        .iter()
        .map(|s| {
            let kept = mask.bits()[s.range()].iter().filter(|b| **b).count();
            (s.id.clone(), kept as f64 / s.len.max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{MaskLayout, ParamKind};

    fn layout(sizes: &[usize]) -> MaskLayout {
        MaskLayout::from_sizes(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| (LayerId::shared(i, ParamKind::Weight), n)),
        )
    }

    fn mask(bits: &[u8], sizes: &[usize]) -> Mask {
        Mask::new(bits.iter().map(|&b| b == 1).collect(), layout(sizes)).unwrap()
    }

    #[test]
    fn identical_masks_give_one() {
        let a = mask(&[1, 0, 1, 1, 0, 1], &[3, 3]);
        let p = layerwise_iou(&[&a, &a.clone()]).unwrap();
        assert_eq!(p.iou, vec![1.0, 1.0]);
    }

    #[test]
    fn disjoint_masks_give_zero() {
        let a = mask(&[1, 1, 0, 0], &[4]);
        let b = mask(&[0, 0, 1, 1], &[4]);
        assert_eq!(layerwise_iou(&[&a, &b]).unwrap().iou, vec![0.0]);
    }

    #[test]
    fn one_third_example() {
        let a = mask(&[1, 1, 0, 0], &[4]);
        let b = mask(&[0, 1, 1, 0], &[4]);
        assert_eq!(layerwise_iou(&[&a, &b]).unwrap().iou, vec![1.0 / 3.0]);
    }

    #[test]
    fn empty_union_is_flagged() {
        let a = mask(&[0, 0, 1], &[2, 1]);
        let p = layerwise_iou(&[&a, &a.clone()]).unwrap();
        assert_eq!(p.iou, vec![1.0, 1.0]);
        assert_eq!(p.degenerate, vec![true, false]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = mask(&[1, 0], &[2]);
        let b = mask(&[1, 0, 1], &[3]);
        assert!(layerwise_iou(&[&a, &b]).is_err());
        assert!(layerwise_iou(&[&a]).is_err());
    }

    fn profile(iou: &[f64]) -> IoUProfile {
        IoUProfile {
            layer_ids: (0..iou.len()).map(|i| LayerId::shared(i, ParamKind::Weight)).collect(),
            iou: iou.to_vec(),
            degenerate: vec![false; iou.len()],
            k: 2,
            watershed_layer: None,
        }
    }

    #[test]
    fn watershed_examples() {
        assert_eq!(detect_watershed(&profile(&[0.5, 0.5, 0.5]), 0.15), None);
        let p = profile(&[0.9, 0.9, 0.3, 0.3]);
        assert_eq!(watershed_index(&p, 0.4), Some(2));
        assert_eq!(detect_watershed(&p, 0.4), Some(LayerId::shared(2, ParamKind::Weight)));
        assert_eq!(detect_watershed(&profile(&[]), 0.1), None);
    }

    #[test]
    fn tsv_has_two_columns() {
        let t = profile(&[1.0, 0.25]).to_tsv();
        assert_eq!(t, "layer_id\tiou\nshared.0.weight\t1\nshared.1.weight\t0.25\n");
    }

    #[test]
    fn density_per_layer() {
        let d = density_profile(&mask(&[1, 0, 1, 1], &[2, 2]));
        assert_eq!(d[0].1, 0.5);
        assert_eq!(d[1].1, 1.0);
    }
}
