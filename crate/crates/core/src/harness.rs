//! Synthetic two-layer MLPs and a seed-swept criterion comparison.
//!
//! The toy model is `fc2(relu(fc1(norm(x))))` with randomly drawn weights.
//! Raw inputs are Gaussian with per-feature offsets and scales spread over
//! a factor of 25. `fc1` sees the normalized input; `fc2` sees the
//! rectified hidden state, which always has a positive mean.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::calib_stats::CalibrationBatch;
use crate::criteria::Criterion;
use crate::error::{PruneError, Result};
use crate::mask_builder::SparsitySpec;
use crate::pruner::{prune_container, BiasUpdate, PruneOptions, PruneReport, CALIB_SUFFIX};
use crate::tensor_store::{TensorContainer, WeightLayer};

pub const LAYER_NAMES: [&str; 2] = ["fc1", "fc2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-feature standardization plus gain: exactly zero-mean features.
    LayerNorm,
    /// Row-wise division by the RMS plus gain: no centering.
    RmsNorm,
    None,
}

impl FromStr for NormKind {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "layernorm" | "layernorm-like" => Ok(NormKind::LayerNorm),
            "rmsnorm" | "rmsnorm-like" => Ok(NormKind::RmsNorm),
            "none" => Ok(NormKind::None),
            _ => Err(PruneError::Parse {
                kind: "norm",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::LayerNorm => "layernorm",
            NormKind::RmsNorm => "rmsnorm",
            NormKind::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ToyConfig {
    /// `[d_in, d_hidden, d_out]`.
    pub dims: [usize; 3],
    pub norm: NormKind,
    pub samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dims: [32, 64, 16],
            norm: NormKind::None,
            samples: 512,
        }
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0f32..1.0) * scale)
}

/// Subtracts each column's mean, repeating so the f32 values themselves
/// average to zero within roundoff.
fn center_columns_f32(x: &mut Array2<f32>) {
    let n = x.nrows() as f64;
    for _ in 0..3 {
        for mut col in x.columns_mut() {
            let mean = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            col.mapv_inplace(|v| (f64::from(v) - mean) as f32);
        }
    }
}

fn normalize(raw: &Array2<f64>, gain: &Array1<f64>, norm: NormKind) -> Array2<f32> {
    match norm {
        NormKind::None => raw.mapv(|v| v as f32),
        NormKind::LayerNorm => {
            let mean = raw.mean_axis(Axis(0)).expect("non-empty");
            let std = raw.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-12));
            let mut out = ((raw - &mean) / &std * gain).mapv(|v| v as f32);
            center_columns_f32(&mut out);
            out
        }
        NormKind::RmsNorm => {
            let mut out = Array2::<f32>::zeros(raw.dim());
            for (i, row) in raw.rows().into_iter().enumerate() {
                let rms = (row.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt().max(1e-12);
                for (j, &v) in row.iter().enumerate() {
                    out[[i, j]] = (v / rms * gain[j]) as f32;
                }
            }
            out
        }
    }
}

/// Applies a layer in f64: `x W + b`.
pub fn layer_forward(layer: &WeightLayer, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&layer.weights().mapv(f64::from)) + &layer.bias_or_zero().insert_axis(Axis(0))
}

/// `fc2(relu(fc1(x)))` on the fc1 input.
pub fn toy_forward(model: &TensorContainer, x: &Array2<f64>) -> Result<Array2<f64>> {
    let fc1 = model.layer(LAYER_NAMES[0])?;
    let fc2 = model.layer(LAYER_NAMES[1])?;
    let h = layer_forward(&fc1, x).mapv(|v| v.max(0.0));
    Ok(layer_forward(&fc2, &h))
}

/// Builds the model container (`fc1`, `fc2` with biases) and the companion
/// calibration container (`fc1.calib`, `fc2.calib`).
pub fn gen_toy_mlp(seed: u64, config: &ToyConfig) -> Result<(TensorContainer, TensorContainer)> {
    let [d_in, d_hidden, d_out] = config.dims;
    if config.dims.contains(&0) {
        return Err(PruneError::InvalidDimension(format!("toy dims {:?} must all be >= 1", config.dims)));
    }
    if config.samples < 2 {
        return Err(PruneError::InvalidDimension("toy model needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let offsets: Vec<f64> = (0..d_in).map(|_| rng.random_range(-3.0..3.0)).collect();
    // Log-uniform scales in [0.2, 5].
    let scales: Vec<f64> = (0..d_in).map(|_| (rng.random_range(-1.0f64..1.0) * 5f64.ln()).exp()).collect();
    let gain = Array1::from_shape_fn(d_in, |_| (rng.random_range(-1.0f64..1.0) * 5f64.ln()).exp());
    let raw = Array2::from_shape_fn((config.samples, d_in), |(_, j)| {
        let z: f64 = rng.sample(StandardNormal);
        offsets[j] + scales[j] * z
    });
    let x = normalize(&raw, &gain, config.norm);

    let w1 = uniform_matrix(&mut rng, d_in, d_hidden, 1.0 / (d_in as f32).sqrt());
    let b1 = Array1::from_shape_fn(d_hidden, |_| rng.random_range(-0.1f32..0.1));
    let w2 = uniform_matrix(&mut rng, d_hidden, d_out, 1.0 / (d_hidden as f32).sqrt());
    let b2 = Array1::from_shape_fn(d_out, |_| rng.random_range(-0.1f32..0.1));

    let fc1 = WeightLayer::new(w1, Some(b1), config.norm == NormKind::LayerNorm)?;
    let fc2 = WeightLayer::new(w2, Some(b2), false)?;
    let hidden = layer_forward(&fc1, &x.mapv(f64::from)).mapv(|v| v.max(0.0) as f32);

    let mut model = TensorContainer::new();
    model.insert_layer(LAYER_NAMES[0], &fc1)?;
    model.insert_layer(LAYER_NAMES[1], &fc2)?;
    let mut calib = TensorContainer::new();
    calib.insert_matrix(&format!("{}{CALIB_SUFFIX}", LAYER_NAMES[0]), &x)?;
    calib.insert_matrix(&format!("{}{CALIB_SUFFIX}", LAYER_NAMES[1]), &hidden)?;
    Ok((model, calib))
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub toy: ToyConfig,
    pub criteria: Vec<Criterion>,
    pub sparsity: SparsitySpec,
    pub bias_update: BiasUpdate,
    pub holdout_fraction: f64,
    pub seeds: usize,
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCell {
    pub seed: u64,
    pub criterion: String,
    pub layer: String,
    pub resolved_criterion: String,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelCell {
    pub seed: u64,
    pub criterion: String,
    pub output_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub criterion: String,
    pub layer: String,
    pub mean_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub toy: ToyConfig,
    pub sparsity: SparsitySpec,
    pub seeds: Vec<u64>,
    pub criteria: Vec<String>,
    pub layer_cells: Vec<LayerCell>,
    pub model_cells: Vec<ModelCell>,
    /// Mean over seeds; layer `"model"` is the end-to-end output MSE.
    pub summary: Vec<SummaryRow>,
}

impl ComparisonTable {
    pub fn layer_mse(&self, seed: u64, criterion: &str, layer: &str) -> Option<f64> {
        if layer == "model" {
            return self
                .model_cells
                .iter()
                .find(|c| c.seed == seed && c.criterion == criterion)
                .map(|c| c.output_mse);
        }
        self.layer_cells
            .iter()
            .find(|c| c.seed == seed && c.criterion == criterion && c.layer == layer)
            .map(|c| c.mse)
    }

    pub fn mean_mse(&self, criterion: &str, layer: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.criterion == criterion && r.layer == layer)
            .map(|r| r.mean_mse)
    }

    /// Fraction of seeds where `a`'s MSE on `layer` is <= `b`'s.
    pub fn win_rate(&self, a: &str, b: &str, layer: &str) -> Option<f64> {
        let mut wins = 0usize;
        for &seed in &self.seeds {
            let (ma, mb) = (self.layer_mse(seed, a, layer)?, self.layer_mse(seed, b, layer)?);
            if ma <= mb {
                wins += 1;
            }
        }
        Some(wins as f64 / self.seeds.len().max(1) as f64)
    }

    /// Aligned plain-text summary: one row per criterion, one column per layer.
    pub fn render_text(&self) -> String {
        let mut layers: Vec<String> = LAYER_NAMES.iter().map(|s| s.to_string()).collect();
        layers.push("model".into());
        let width = self.criteria.iter().map(|c| c.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<width$}", "criterion");
        for l in &layers {
            out.push_str(&format!("  {:>14}", format!("{l} mse")));
        }
        out.push('\n');
        for c in &self.criteria {
            out.push_str(&format!("{c:<width$}"));
            for l in &layers {
                match self.mean_mse(c, l) {
                    Some(v) => out.push_str(&format!("  {v:>14.6e}")),
                    None => out.push_str(&format!("  {:>14}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

struct SeedResult {
    layer_cells: Vec<LayerCell>,
    model_cells: Vec<ModelCell>,
}

fn run_seed(config: &BenchConfig, seed: u64) -> Result<SeedResult> {
    let (model, calib) = gen_toy_mlp(seed, &config.toy)?;
    let x = calib.matrix(&format!("{}{CALIB_SUFFIX}", LAYER_NAMES[0]))?;
    let holdout_rows = (config.holdout_fraction * x.nrows() as f64).floor() as usize;
    let (train, holdout) = CalibrationBatch::from_f32(&x)?.split_tail(holdout_rows);
    let eval = if holdout.is_empty() { train } else { holdout };
    let dense_out = toy_forward(&model, eval.rows())?;

    let mut layer_cells = Vec::new();
    let mut model_cells = Vec::new();
    for &criterion in &config.criteria {
        let opts = PruneOptions {
            bias_update: config.bias_update,
            holdout_fraction: config.holdout_fraction,
            ..PruneOptions::new(criterion, config.sparsity)
        };
        let (pruned, report): (TensorContainer, PruneReport) = prune_container(&model, &calib, &opts)?;
        for r in &report.layers {
            layer_cells.push(LayerCell {
                seed,
                criterion: criterion.name().to_string(),
                layer: r.layer.clone(),
                resolved_criterion: r.criterion.clone(),
                mse: r.mse,
            });
        }
        let out = toy_forward(&pruned, eval.rows())?;
        let diff = &out - &dense_out;
        model_cells.push(ModelCell {
            seed,
            criterion: criterion.name().to_string(),
            output_mse: diff.mapv(|d| d * d).sum() / diff.len() as f64,
        });
    }
    Ok(SeedResult {
        layer_cells,
        model_cells,
    })
}

/// Runs every criterion on `seeds` freshly generated toy models.
pub fn run_comparison(config: &BenchConfig) -> Result<ComparisonTable> {
    if config.criteria.len() < 2 {
        return Err(PruneError::InvalidDimension("comparison needs at least two criteria".into()));
    }
    let seeds: Vec<u64> = (0..config.seeds as u64).map(|s| config.base_seed + s).collect();
    let per_seed: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&s| run_seed(config, s))
        .collect::<Result<_>>()?;

    let mut layer_cells = Vec::new();
    let mut model_cells = Vec::new();
    for r in per_seed {
        layer_cells.extend(r.layer_cells);
        model_cells.extend(r.model_cells);
    }

    let criteria: Vec<String> = config.criteria.iter().map(|c| c.name().to_string()).collect();
    let mut summary = Vec::new();
    let n = seeds.len().max(1) as f64;
    for c in &criteria {
        for layer in LAYER_NAMES {
            let total: f64 = layer_cells
                .iter()
                .filter(|cell| &cell.criterion == c && cell.layer == layer)
                .map(|cell| cell.mse)
                .sum();
            summary.push(SummaryRow {
                criterion: c.clone(),
                layer: layer.to_string(),
                mean_mse: total / n,
            });
        }
        let total: f64 = model_cells
            .iter()
            .filter(|cell| &cell.criterion == c)
            .map(|cell| cell.output_mse)
            .sum();
        summary.push(SummaryRow {
            criterion: c.clone(),
            layer: "model".into(),
            mean_mse: total / n,
        });
    }
    Ok(ComparisonTable {
        toy: config.toy,
        sparsity: config.sparsity,
        seeds,
        criteria,
        layer_cells,
        model_cells,
        summary,
    })
}
