use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskLayout;
use crate::model::MultitaskModel;

use super::check_sparsity;

/// Fan-in, fan-out and parameter count of one maskable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub len: usize,
}

impl LayerShape {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerShape {
            fan_in,
            fan_out,
            len: fan_in * fan_out,
        }
    }

    fn raw_density(&self) -> f64 {
        (self.fan_in + self.fan_out) as f64 / (self.fan_in * self.fan_out) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErkAllocation {
    /// Real-valued density of each layer, at most one.
    pub densities: Vec<f64>,
    /// Integer kept counts; they sum to `round((1 − S) m)`.
    pub counts: Vec<usize>,
}

impl ErkAllocation {
    pub fn sparsities(&self) -> Vec<f64> {
        self.densities.iter().map(|d| 1.0 - d).collect()
    }
}

/// Layer densities proportional to `(fan_in + fan_out) / (fan_in · fan_out)`
/// scaled to keep `(1 − S) m` parameters in total. Layers that would exceed
/// density one are made dense and the rest is redistributed.
pub fn erk_allocation(layers: &[LayerShape], s: f64) -> Result<ErkAllocation> {
    check_sparsity(s)?;
    if layers.is_empty() {
        return Ok(ErkAllocation {
            densities: vec![],
            counts: vec![],
        });
    }
    if layers.iter().any(|l| l.len == 0 || l.fan_in == 0 || l.fan_out == 0) {
        return Err(Error::Layout("ERK allocation over an empty layer".into()));
    }
    let m: usize = layers.iter().map(|l| l.len).sum();
    let budget = (1.0 - s) * m as f64;
    let mut dense = vec![false; layers.len()];
    let densities = loop {
        let dense_len: usize = layers.iter().zip(&dense).filter(|(_, d)| **d).map(|(l, _)| l.len).sum();
        let free_len = m - dense_len;
        let keep_free = if dense_len == 0 {
            1.0 - s
        } else {
            (budget - dense_len as f64) / free_len as f64
        };
        if keep_free <= 0.0 {
            return Err(Error::Sparsity(s));
        }
        let weighted: f64 = layers
            .iter()
            .zip(&dense)
            .filter(|(_, d)| !**d)
            .map(|(l, _)| l.raw_density() * l.len as f64)
            .sum();
        let d: Vec<f64> = layers
            .iter()
            .zip(&dense)
            .map(|(l, &is_dense)| {
                if is_dense {
                    1.0
                } else {
                    keep_free * (l.raw_density() * free_len as f64 / weighted)
                }
            })
            .collect();
        let mut changed = false;
        for (i, &di) in d.iter().enumerate() {
            if !dense[i] && di > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            break d;
        }
    };

    let target = budget.round() as usize;
    let real: Vec<f64> = densities.iter().zip(layers).map(|(d, l)| d * l.len as f64).collect();
    let mut counts: Vec<usize> = real
        .iter()
        .zip(layers)
        .map(|(c, l)| ((c + 1e-9).floor() as usize).min(l.len))
        .collect();
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = real[a] - counts[a] as f64;
        let fb = real[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut sum: usize = counts.iter().sum();
    // Largest remainder first; cycles only if rounding left several units.
    while sum < target {
        let before = sum;
        for &i in &order {
            if sum == target {
                break;
            }
            if counts[i] < layers[i].len {
                counts[i] += 1;
                sum += 1;
            }
        }
        if sum == before {
            break;
        }
    }
    while sum > target {
        let i = order
            .iter()
            .rev()
            .copied()
            .find(|&i| counts[i] > 0)
            .expect("positive count");
        counts[i] -= 1;
        sum -= 1;
    }
    Ok(ErkAllocation { densities, counts })
}

/// ERK kept counts for the spans of `layout`, with shapes read from `model`.
pub fn erk_counts_for(model: &MultitaskModel, layout: &MaskLayout, s: f64) -> Result<Vec<usize>> {
    let shapes = layout
        .spans()
        .iter()
        .map(|span| {
            let (fan_in, fan_out) = model.fans(&span.id)?;
            Ok(LayerShape {
                fan_in,
                fan_out,
                len: span.len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(erk_allocation(&shapes, s)?.counts)
}
