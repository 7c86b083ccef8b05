//! Layer-wise pruning of a whole container.
//!
//! Every weight layer `<name>` in the model needs a companion `<name>.calib`
//! tensor (N×M activations at that layer's input) in the calibration
//! container. The last `floor(holdout_fraction * N)` rows are held out for
//! the reconstruction error; statistics use the rest. Layers are pruned
//! independently and in parallel.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::calib_stats::{CalibrationBatch, ColumnStats};
use crate::compensator::{bias_delta_norm, bias_update};
use crate::criteria::{score_layer, select_criterion, Criterion, GramAccumulator};
use crate::error::{PruneError, Result};
use crate::mask_builder::{apply_mask, build_mask, validate_mask, PruneMask, SparsitySpec};
use crate::tensor_store::{TensorContainer, WeightLayer};

pub const CALIB_SUFFIX: &str = ".calib";

/// Rows per streamed statistics update.
const STATS_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasUpdate {
    /// On for STADE, off for every other resolved criterion.
    Auto,
    On,
    Off,
}

impl BiasUpdate {
    pub fn enabled_for(self, resolved: Criterion) -> bool {
        match self {
            BiasUpdate::Auto => resolved.default_bias_update(),
            BiasUpdate::On => true,
            BiasUpdate::Off => false,
        }
    }
}

impl FromStr for BiasUpdate {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(BiasUpdate::Auto),
            "on" | "true" => Ok(BiasUpdate::On),
            "off" | "false" => Ok(BiasUpdate::Off),
            _ => Err(PruneError::Parse {
                kind: "bias-update mode",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for BiasUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasUpdate::Auto => "auto",
            BiasUpdate::On => "on",
            BiasUpdate::Off => "off",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PruneOptions {
    pub criterion: Criterion,
    pub sparsity: SparsitySpec,
    pub bias_update: BiasUpdate,
    pub holdout_fraction: f64,
    /// Cut-off for the `max |mean| / std` centering diagnostic.
    pub center_threshold: f64,
}

impl PruneOptions {
    pub fn new(criterion: Criterion, sparsity: SparsitySpec) -> Self {
        PruneOptions {
            criterion,
            sparsity,
            bias_update: BiasUpdate::Auto,
            holdout_fraction: 0.2,
            center_threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub requested_criterion: String,
    pub criterion: String,
    pub sparsity: SparsitySpec,
    pub achieved_sparsity: f64,
    pub bias_update: bool,
    pub bias_delta_norm: f64,
    /// The layer had no bias and compensation created one.
    pub bias_added: bool,
    pub mse: f64,
    /// `"holdout"`, or `"calibration"` when no rows were held out.
    pub mse_split: &'static str,
    pub stats_rows: usize,
    pub holdout_rows: usize,
    pub centered: bool,
    pub classified_centered: Option<bool>,
    pub max_abs_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
}

impl PruneReport {
    pub fn get(&self, layer: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|r| r.layer == layer)
    }
}

/// Result of pruning one layer.
#[derive(Clone, Debug)]
pub struct PrunedLayer {
    pub layer: WeightLayer,
    pub mask: PruneMask,
    pub report: LayerReport,
}

/// `max_j |mean_j| / (std_j + 1e-12) <= threshold`.
pub fn classify_centered(stats: &ColumnStats, threshold: f64) -> Result<bool> {
    if stats.count() < 2 {
        return Err(PruneError::InsufficientSamples {
            n: stats.count(),
            required: 2,
        });
    }
    let ratio = stats
        .mean()
        .iter()
        .zip(stats.var().iter())
        .map(|(mu, v)| mu.abs() / (v.sqrt() + 1e-12))
        .fold(0.0f64, f64::max);
    Ok(ratio <= threshold)
}

/// Mean over rows and outputs of the squared difference between the two
/// layers' outputs on `rows`.
pub fn reconstruction_mse(original: &WeightLayer, pruned: &WeightLayer, rows: &CalibrationBatch) -> Result<f64> {
    if original.weights().dim() != pruned.weights().dim() {
        return Err(PruneError::ShapeMismatch {
            name: "pruned layer".into(),
            detail: format!("{:?} vs {:?}", pruned.weights().dim(), original.weights().dim()),
        });
    }
    if rows.width() != original.inputs() {
        return Err(PruneError::ShapeMismatch {
            name: "holdout".into(),
            detail: format!("{} columns vs {} layer inputs", rows.width(), original.inputs()),
        });
    }
    if rows.is_empty() {
        return Err(PruneError::InsufficientSamples { n: 0, required: 1 });
    }
    // Work with the weight and bias differences directly so unchanged
    // entries contribute exactly nothing.
    let dw: Array2<f64> = original.weights().mapv(f64::from) - pruned.weights().mapv(f64::from);
    let db = original.bias_or_zero() - pruned.bias_or_zero();
    let diff = rows.rows().dot(&dw) + &db.insert_axis(Axis(0));
    Ok(diff.mapv(|d| d * d).sum() / diff.len() as f64)
}

pub fn prune_layer(
    name: &str,
    layer: &WeightLayer,
    calib: &CalibrationBatch,
    opts: &PruneOptions,
) -> Result<PrunedLayer> {
    if calib.width() != layer.inputs() {
        return Err(PruneError::DimensionMismatch {
            expected: layer.inputs(),
            found: calib.width(),
        });
    }
    let holdout_rows = (opts.holdout_fraction * calib.len() as f64).floor() as usize;
    let (train, holdout) = calib.split_tail(holdout_rows);

    let mut stats = ColumnStats::new(layer.inputs())?;
    for chunk in train.chunks(STATS_CHUNK) {
        stats.update(&chunk)?;
    }
    let resolved = select_criterion(opts.criterion, layer.centered());
    let gram = match resolved {
        Criterion::SparseGptScore { .. } => Some(GramAccumulator::from_batch(&train)?),
        _ => None,
    };

    let scores = score_layer(resolved, layer, &stats, gram.as_ref())?;
    let mask = build_mask(&scores, opts.sparsity)?;
    debug_assert!(validate_mask(&mask, opts.sparsity).is_ok());

    let apply_bias = opts.bias_update.enabled_for(resolved);
    let compensated = bias_update(layer, &mask, &stats, apply_bias)?;
    let pruned = apply_mask(&compensated, &mask)?;

    let (mse, mse_split) = if holdout.is_empty() {
        (reconstruction_mse(layer, &pruned, &train)?, "calibration")
    } else {
        (reconstruction_mse(layer, &pruned, &holdout)?, "holdout")
    };

    let classified = classify_centered(&stats, opts.center_threshold).ok();
    let warning = match classified {
        Some(c) if c != layer.centered() => Some(format!(
            "manifest flags centered={} but calibration statistics suggest centered={c}; using the manifest flag",
            layer.centered()
        )),
        _ => None,
    };

    let report = LayerReport {
        layer: name.to_string(),
        requested_criterion: opts.criterion.name().to_string(),
        criterion: resolved.name().to_string(),
        sparsity: opts.sparsity,
        achieved_sparsity: mask.sparsity(),
        bias_update: apply_bias,
        bias_delta_norm: bias_delta_norm(layer, &pruned)?,
        bias_added: layer.bias().is_none() && pruned.bias().is_some(),
        mse,
        mse_split,
        stats_rows: train.len(),
        holdout_rows: holdout.len(),
        centered: layer.centered(),
        classified_centered: classified,
        max_abs_mean: stats.max_abs_mean(),
        warning,
    };
    Ok(PrunedLayer {
        layer: pruned,
        mask,
        report,
    })
}

/// Prunes every layer of `model`; the output holds the pruned layers, a
/// `<layer>.mask` per layer and every other input entry unchanged.
pub fn prune_container(
    model: &TensorContainer,
    calib: &TensorContainer,
    opts: &PruneOptions,
) -> Result<(TensorContainer, PruneReport)> {
    if !(0.0..=0.5).contains(&opts.holdout_fraction) {
        return Err(PruneError::InvalidHoldout(opts.holdout_fraction));
    }
    let names = model.layer_names();
    for name in &names {
        if !calib.contains(&format!("{name}{CALIB_SUFFIX}")) {
            return Err(PruneError::MissingCalibration(name.clone()));
        }
    }
    let results: Vec<PrunedLayer> = names
        .par_iter()
        .map(|name| {
            let layer = model.layer(name)?;
            let rows = CalibrationBatch::from_f32(&calib.matrix(&format!("{name}{CALIB_SUFFIX}"))?)?;
            prune_layer(name, &layer, &rows, opts)
        })
        .collect::<Result<_>>()?;

    let mut out = model.clone();
    let mut report = PruneReport::default();
    for (name, r) in names.iter().zip(results) {
        out.insert_layer(name, &r.layer)?;
        r.mask.write_to(&mut out, name)?;
        report.layers.push(r.report);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classify() {
        let centered = ColumnStats::from_batch(&CalibrationBatch::new(array![[1.0, -2.0], [-1.0, 2.0]]).unwrap()).unwrap();
        assert!(classify_centered(&centered, 1e-6).unwrap());

        let shifted = ColumnStats::from_batch(&CalibrationBatch::new(array![[9.0], [11.0], [10.0]]).unwrap()).unwrap();
        assert!(!classify_centered(&shifted, 0.1).unwrap());

        let one = ColumnStats::from_batch(&CalibrationBatch::new(array![[1.0]]).unwrap()).unwrap();
        assert!(matches!(
            classify_centered(&one, 0.1),
            Err(PruneError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn mse_identity_and_errors() {
        let layer = WeightLayer::new(array![[1.0, 2.0], [3.0, 4.0]], Some(array![0.5, 0.5]), false).unwrap();
        let rows = CalibrationBatch::new(array![[1.0, 2.0], [3.0, -1.0]]).unwrap();
        assert_eq!(reconstruction_mse(&layer, &layer, &rows).unwrap(), 0.0);
        let narrow = CalibrationBatch::new(array![[1.0]]).unwrap();
        assert!(reconstruction_mse(&layer, &layer, &narrow).is_err());
    }

    #[test]
    fn single_prune_mse_is_variance_times_weight_squared() {
        // Prune W[0] = 2 of a one-output layer with the bias update: the
        // remaining error is the population variance of x_0 times 4.
        let rows = CalibrationBatch::new(array![[1.0, 5.0], [2.0, 5.5], [4.0, 6.0], [5.0, 4.0]]).unwrap();
        let stats = ColumnStats::from_batch(&rows).unwrap();
        let layer = WeightLayer::new(array![[2.0], [1.0]], Some(array![0.25]), false).unwrap();
        let mask = PruneMask::new(array![[true], [false]]);
        let pruned = apply_mask(&bias_update(&layer, &mask, &stats, true).unwrap(), &mask).unwrap();
        let mse = reconstruction_mse(&layer, &pruned, &rows).unwrap();
        let pop_var = stats.population_var()[0];
        assert!((mse - pop_var * 4.0).abs() < 1e-6);
    }

    #[test]
    fn bias_update_modes() {
        assert!(BiasUpdate::Auto.enabled_for(Criterion::Stade));
        assert!(!BiasUpdate::Auto.enabled_for(Criterion::Wanda));
        assert!(!BiasUpdate::Auto.enabled_for(Criterion::Magnitude));
        assert!(!BiasUpdate::Auto.enabled_for(Criterion::StadeStar));
        assert!(BiasUpdate::On.enabled_for(Criterion::Magnitude));
        assert_eq!("off".parse::<BiasUpdate>().unwrap(), BiasUpdate::Off);
        assert!("maybe".parse::<BiasUpdate>().is_err());
    }

    #[test]
    fn missing_calibration() {
        let mut model = TensorContainer::new();
        model
            .insert_layer("fc1", &WeightLayer::new(array![[1.0]], None, false).unwrap())
            .unwrap();
        let opts = PruneOptions::new(Criterion::Wanda, SparsitySpec::Unstructured(0.5));
        assert!(matches!(
            prune_container(&model, &TensorContainer::new(), &opts),
            Err(PruneError::MissingCalibration(name)) if name == "fc1"
        ));
    }

    #[test]
    fn holdout_bounds() {
        let opts = PruneOptions {
            holdout_fraction: 0.6,
            ..PruneOptions::new(Criterion::Wanda, SparsitySpec::Unstructured(0.5))
        };
        assert!(matches!(
            prune_container(&TensorContainer::new(), &TensorContainer::new(), &opts),
            Err(PruneError::InvalidHoldout(_))
        ));
    }
}
