//! Optimal bias compensation after pruning.
//!
//! Zeroing `W[j, m]` shifts the expected output of column `m` by
//! `mean_j * W[j, m]`; adding that shift back to the bias minimizes the
//! expected squared error over the bias. With several pruned inputs the
//! shifts add up.

use ndarray::Array1;

use crate::calib_stats::ColumnStats;
use crate::error::{PruneError, Result};
use crate::mask_builder::PruneMask;
use crate::tensor_store::WeightLayer;

/// Per-output `sum over pruned j of mean_j * W[j, m]`, using `layer`'s
/// (pre-prune) weights.
pub fn bias_delta(layer: &WeightLayer, mask: &PruneMask, stats: &ColumnStats) -> Result<Array1<f64>> {
    if mask.shape() != layer.weights().dim() {
        return Err(PruneError::ShapeMismatch {
            name: "mask".into(),
            detail: format!("mask {:?} vs weights {:?}", mask.shape(), layer.weights().dim()),
        });
    }
    if stats.features() != layer.inputs() {
        return Err(PruneError::ShapeMismatch {
            name: "stats".into(),
            detail: format!("{} features vs {} layer inputs", stats.features(), layer.inputs()),
        });
    }
    if stats.count() == 0 {
        return Err(PruneError::EmptyStats);
    }
    let mean = stats.mean();
    let mut delta = Array1::<f64>::zeros(layer.outputs());
    for ((j, m), &pruned) in mask.as_array().indexed_iter() {
        if pruned {
            delta[m] += mean[j] * f64::from(layer.weights()[[j, m]]);
        }
    }
    Ok(delta)
}

/// Returns `layer` with `B* = B + bias_delta` when `enabled`; weights are
/// left as given. A bias vector is created only if the layer had none and
/// some delta is non-zero.
pub fn bias_update(
    layer: &WeightLayer,
    mask: &PruneMask,
    stats: &ColumnStats,
    enabled: bool,
) -> Result<WeightLayer> {
    let delta = bias_delta(layer, mask, stats)?;
    if !enabled {
        return Ok(layer.clone());
    }
    let mut out = layer.clone();
    match &mut out.bias {
        Some(b) => {
            for (bm, d) in b.iter_mut().zip(delta.iter()) {
                *bm = (f64::from(*bm) + d) as f32;
            }
        }
        None if delta.iter().any(|&d| d != 0.0) => {
            out.bias = Some(delta.mapv(|d| d as f32));
        }
        None => {}
    }
    Ok(out)
}

/// `sum_m |B*[m] - B[m]|`, an absent bias counting as zeros.
pub fn bias_delta_norm(before: &WeightLayer, after: &WeightLayer) -> Result<f64> {
    if before.outputs() != after.outputs() {
        return Err(PruneError::ShapeMismatch {
            name: "bias".into(),
            detail: format!("{} vs {} outputs", before.outputs(), after.outputs()),
        });
    }
    let b0 = before.bias_or_zero();
    let b1 = after.bias_or_zero();
    Ok(b0.iter().zip(b1.iter()).map(|(x, y)| (y - x).abs()).sum())
}
