//! Exhaustive single-weight pruning, used as ground truth for the criteria.
//!
//! For one output column with weights `w` and bias `B`, removing input `j`
//! and moving the bias to `b` gives the empirical objective
//! `mean_rows((x.w + B - (x.w' + b))^2)` with `w'_j = 0`. The brute force
//! evaluates that directly for every `j`; with the bias free, `b` takes its
//! closed-form minimizer `B + mean(x_j) * w_j`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::calib_stats::{CalibrationBatch, ColumnStats};
use crate::criteria::{score_layer, select_criterion, Criterion, GramAccumulator};
use crate::error::{PruneError, Result};
use crate::tensor_store::WeightLayer;

pub const MAX_FEATURES: usize = 64;
pub const MAX_ROWS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SinglePrune {
    pub index: usize,
    pub bias: f64,
    pub objective: f64,
}

fn check_instance(w: &[f64], calib: &CalibrationBatch) -> Result<()> {
    if w.is_empty() {
        return Err(PruneError::InvalidDimension("empty weight column".into()));
    }
    if w.len() > MAX_FEATURES || calib.len() > MAX_ROWS {
        return Err(PruneError::InstanceTooLarge(format!(
            "{} features x {} rows (limits {MAX_FEATURES} x {MAX_ROWS})",
            w.len(),
            calib.len()
        )));
    }
    if calib.width() != w.len() {
        return Err(PruneError::DimensionMismatch {
            expected: w.len(),
            found: calib.width(),
        });
    }
    if calib.is_empty() {
        return Err(PruneError::InsufficientSamples { n: 0, required: 1 });
    }
    Ok(())
}

/// Objective and bias for removing input `j` (bias closed-form when allowed).
fn evaluate(w: &[f64], bias: f64, calib: &CalibrationBatch, j: usize, allow_bias: bool) -> SinglePrune {
    let x = calib.rows();
    let n = x.nrows() as f64;
    let new_bias = if allow_bias {
        let mean_j = x.column(j).sum() / n;
        bias + mean_j * w[j]
    } else {
        bias
    };
    let mut total = 0.0;
    for row in x.rows() {
        let mut dense = bias;
        let mut pruned = new_bias;
        for (i, (&xi, &wi)) in row.iter().zip(w).enumerate() {
            dense += xi * wi;
            if i != j {
                pruned += xi * wi;
            }
        }
        total += (dense - pruned).powi(2);
    }
    SinglePrune {
        index: j,
        bias: new_bias,
        objective: total / n,
    }
}

/// Objective of removing one specific input.
pub fn single_prune_objective(
    w: &[f64],
    bias: f64,
    calib: &CalibrationBatch,
    j: usize,
    allow_bias: bool,
) -> Result<SinglePrune> {
    check_instance(w, calib)?;
    if j >= w.len() {
        return Err(PruneError::DimensionMismatch {
            expected: w.len(),
            found: j,
        });
    }
    Ok(evaluate(w, bias, calib, j, allow_bias))
}

/// Tries every input; ties keep the lowest index.
pub fn brute_force_single_prune(
    w: &[f64],
    bias: f64,
    calib: &CalibrationBatch,
    allow_bias: bool,
) -> Result<SinglePrune> {
    check_instance(w, calib)?;
    let mut best = evaluate(w, bias, calib, 0, allow_bias);
    for j in 1..w.len() {
        let cand = evaluate(w, bias, calib, j, allow_bias);
        if cand.objective < best.objective {
            best = cand;
        }
    }
    Ok(best)
}

/// Distribution of random verification instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceFamily {
    /// `x_j = mu_j + sigma_j z`, `mu_j ~ U(-5, 5)`, `sigma_j ~ U(0.1, 2)`.
    Uncentered,
    /// Uncentered draws with each column's sample mean subtracted.
    Centered,
    /// Uncentered draws with one near-constant feature: `sigma <= 0.05`, `|mu| >= 3`.
    Offset,
}

impl std::str::FromStr for InstanceFamily {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uncentered" => Ok(InstanceFamily::Uncentered),
            "centered" => Ok(InstanceFamily::Centered),
            "offset" => Ok(InstanceFamily::Offset),
            _ => Err(PruneError::Parse {
                kind: "instance family",
                value: s.to_string(),
            }),
        }
    }
}

impl InstanceFamily {
    /// Family on which `criterion` is claimed optimal.
    pub fn default_for(criterion: Criterion) -> Self {
        match criterion {
            Criterion::Wanda => InstanceFamily::Centered,
            _ => InstanceFamily::Uncentered,
        }
    }
}

/// One random single-column instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub rows: Array2<f64>,
    /// f32-representable so the same values feed a `WeightLayer`.
    pub weights: Vec<f32>,
    pub bias: f32,
    pub centered: bool,
}

impl Instance {
    pub fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|&w| f64::from(w)).collect()
    }

    pub fn layer(&self) -> WeightLayer {
        let w = Array2::from_shape_vec((self.weights.len(), 1), self.weights.clone()).expect("column");
        WeightLayer::new(w, Some(Array1::from_elem(1, self.bias)), self.centered).expect("finite instance")
    }

    pub fn batch(&self) -> CalibrationBatch {
        CalibrationBatch::new(self.rows.clone()).expect("finite instance")
    }
}

pub fn gen_instance(family: InstanceFamily, rng: &mut impl Rng) -> Instance {
    let n = rng.random_range(8..=64usize);
    let m = rng.random_range(2..=16usize);
    let mut mu: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    if family == InstanceFamily::Offset {
        let j = rng.random_range(0..m);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        mu[j] = sign * rng.random_range(3.0..5.0);
        sigma[j] = rng.random_range(0.0..0.05);
    }
    let mut rows = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            rows[[i, j]] = mu[j] + sigma[j] * z;
        }
    }
    if family == InstanceFamily::Centered {
        for mut col in rows.columns_mut() {
            let mean = col.sum() / n as f64;
            col.mapv_inplace(|v| v - mean);
        }
    }
    let weights = (0..m).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let bias = rng.random_range(-1.0f32..1.0);
    Instance {
        rows,
        weights,
        bias,
        centered: family == InstanceFamily::Centered,
    }
}

/// RNG for trial `trial` under `seed`: an independent ChaCha stream per trial.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyConfig {
    pub criterion: Criterion,
    pub trials: usize,
    pub seed: u64,
    /// Defaults to [`InstanceFamily::default_for`] the criterion.
    pub family: Option<InstanceFamily>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counterexample {
    pub trial: usize,
    pub criterion_index: usize,
    pub oracle_index: usize,
    pub criterion_objective: f64,
    pub oracle_objective: f64,
    pub weights: Vec<f32>,
    pub bias: f32,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub criterion: String,
    pub resolved_criterion: String,
    pub family: InstanceFamily,
    pub allow_bias: bool,
    pub seed: u64,
    pub trials: usize,
    pub matches: usize,
    pub mismatches: usize,
    pub first_counterexample: Option<Counterexample>,
}

impl VerifyReport {
    pub fn all_match(&self) -> bool {
        self.mismatches == 0
    }
}

/// Outcome of one verification trial.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub instance: Instance,
    pub criterion_index: usize,
    pub criterion_objective: f64,
    pub oracle: SinglePrune,
}

impl TrialOutcome {
    pub fn matched(&self) -> bool {
        self.criterion_index == self.oracle.index
    }
}

pub fn run_trial(criterion: Criterion, family: InstanceFamily, seed: u64, trial: usize) -> Result<TrialOutcome> {
    let mut rng = trial_rng(seed, trial as u64);
    let instance = gen_instance(family, &mut rng);
    let batch = instance.batch();
    let layer = instance.layer();
    let resolved = select_criterion(criterion, instance.centered);
    let allow_bias = resolved != Criterion::StadeStar;

    let stats = ColumnStats::from_batch(&batch)?;
    let gram = match resolved {
        Criterion::SparseGptScore { .. } => Some(GramAccumulator::from_batch(&batch)?),
        _ => None,
    };
    let scores = score_layer(resolved, &layer, &stats, gram.as_ref())?;
    let criterion_index = scores.argmin_in_column(0);

    let w = instance.weights_f64();
    let bias = f64::from(instance.bias);
    let oracle = brute_force_single_prune(&w, bias, &batch, allow_bias)?;
    let criterion_objective = evaluate(&w, bias, &batch, criterion_index, allow_bias).objective;
    Ok(TrialOutcome {
        instance,
        criterion_index,
        criterion_objective,
        oracle,
    })
}

/// Runs `trials` random instances and counts argmin agreement between the
/// criterion and the brute force. The bias is free for every criterion
/// except STADE*.
pub fn check_criterion_optimality(config: &VerifyConfig) -> Result<VerifyReport> {
    let family = config.family.unwrap_or_else(|| InstanceFamily::default_for(config.criterion));
    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config.criterion, family, config.seed, t))
        .collect::<Result<_>>()?;

    let resolved = select_criterion(config.criterion, family == InstanceFamily::Centered);
    let matches = outcomes.iter().filter(|o| o.matched()).count();
    let first_counterexample = outcomes
        .iter()
        .enumerate()
        .find(|(_, o)| !o.matched())
        .map(|(trial, o)| Counterexample {
            trial,
            criterion_index: o.criterion_index,
            oracle_index: o.oracle.index,
            criterion_objective: o.criterion_objective,
            oracle_objective: o.oracle.objective,
            weights: o.instance.weights.clone(),
            bias: o.instance.bias,
            rows: o.instance.rows.rows().into_iter().map(|r| r.to_vec()).collect(),
        });
    Ok(VerifyReport {
        criterion: config.criterion.name().to_string(),
        resolved_criterion: resolved.name().to_string(),
        family,
        allow_bias: resolved != Criterion::StadeStar,
        seed: config.seed,
        trials: config.trials,
        matches,
        mismatches: config.trials - matches,
        first_counterexample,
    })
}
