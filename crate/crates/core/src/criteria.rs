//! Per-weight importance scores. Lower score = pruned first.
//!
//! | criterion  | score for W[j, m]                              |
//! |------------|------------------------------------------------|
//! | magnitude  | `|W|`                                          |
//! | wanda      | `||X[:, j]||_2 |W|`                            |
//! | stade      | `||X[:, j] - mean_j||_2 |W|`                   |
//! | stade-star | `sqrt(popvar_j + mean_j^2) |W|`                |
//! | sparsegpt  | `W^2 / diag((X^T X + lambda I)^-1)_j`          |
//!
//! `stade-w` is not a score of its own: it resolves to `wanda` on layers
//! flagged centered and to `stade` elsewhere.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::calib_stats::{CalibrationBatch, ColumnStats};
use crate::error::{PruneError, Result};
use crate::tensor_store::WeightLayer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    /// `0.01 * mean(diag(G))`.
    Auto,
    Fixed(f64),
}

impl Damping {
    pub fn resolve(self, gram: &Array2<f64>) -> f64 {
        match self {
            Damping::Fixed(lambda) => lambda,
            Damping::Auto => {
                let m = gram.nrows().max(1) as f64;
                0.01 * gram.diag().sum() / m
            }
        }
    }
}

impl FromStr for Damping {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Damping::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Damping::Fixed(v)),
            _ => Err(PruneError::Parse {
                kind: "damping",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Magnitude,
    Wanda,
    Stade,
    StadeStar,
    StadeW,
    SparseGptScore { damping: Damping },
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Wanda => "wanda",
            Criterion::Stade => "stade",
            Criterion::StadeStar => "stade-star",
            Criterion::StadeW => "stade-w",
            Criterion::SparseGptScore { .. } => "sparsegpt-score",
        }
    }

    /// Whether the criterion's own definition includes the bias update.
    pub fn default_bias_update(&self) -> bool {
        matches!(self, Criterion::Stade)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "magnitude" => Criterion::Magnitude,
            "wanda" => Criterion::Wanda,
            "stade" => Criterion::Stade,
            "stade-star" | "stade*" => Criterion::StadeStar,
            "stade-w" => Criterion::StadeW,
            "sparsegpt-score" | "sparsegpt" => Criterion::SparseGptScore {
                damping: Damping::Auto,
            },
            _ => {
                return Err(PruneError::Parse {
                    kind: "criterion",
                    value: s.to_string(),
                })
            }
        })
    }
}

/// Resolves `StadeW` against the layer's centered flag; other criteria pass through.
pub fn select_criterion(criterion: Criterion, centered: bool) -> Criterion {
    match criterion {
        Criterion::StadeW if centered => Criterion::Wanda,
        Criterion::StadeW => Criterion::Stade,
        other => other,
    }
}

/// Non-negative scores, same M×H layout as the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(PruneError::NonFiniteInput(
                "score matrix (entries must be finite and >= 0)".into(),
            ));
        }
        Ok(ScoreMatrix(scores))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Index of the lowest score in output column `m`, ties to the lowest index.
    pub fn argmin_in_column(&self, m: usize) -> usize {
        let col = self.0.column(m);
        let mut best = 0;
        for j in 1..col.len() {
            if col[j].total_cmp(&col[best]).is_lt() {
                best = j;
            }
        }
        best
    }
}

/// Running `sum_rows x^T x`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramAccumulator {
    gram: Array2<f64>,
    n: u64,
}

impl GramAccumulator {
    pub fn new(features: usize) -> Result<Self> {
        if features == 0 {
            return Err(PruneError::InvalidDimension("Gram needs at least one feature".into()));
        }
        Ok(GramAccumulator {
            gram: Array2::zeros((features, features)),
            n: 0,
        })
    }

    pub fn from_batch(batch: &CalibrationBatch) -> Result<Self> {
        let mut g = Self::new(batch.width())?;
        g.update(batch)?;
        Ok(g)
    }

    pub fn update(&mut self, batch: &CalibrationBatch) -> Result<()> {
        if batch.width() != self.gram.nrows() {
            return Err(PruneError::DimensionMismatch {
                expected: self.gram.nrows(),
                found: batch.width(),
            });
        }
        let x = batch.view();
        self.gram += &x.t().dot(&x);
        self.n += x.nrows() as u64;
        Ok(())
    }

    pub fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    pub fn count(&self) -> u64 {
        self.n
    }
}

fn check_weights(weights: &Array2<f32>) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(PruneError::NonFiniteInput("weight matrix".into()));
    }
    Ok(())
}

fn check_stats(weights: &Array2<f32>, stats: &ColumnStats, min_n: u64) -> Result<()> {
    if stats.features() != weights.nrows() {
        return Err(PruneError::DimensionMismatch {
            expected: weights.nrows(),
            found: stats.features(),
        });
    }
    match (stats.count(), min_n) {
        (0, _) => Err(PruneError::EmptyStats),
        (n, req) if n < req => Err(PruneError::InsufficientSamples { n, required: req }),
        _ => Ok(()),
    }
}

/// `scores[j, m] = row_factor[j] * |W[j, m]|`.
fn row_scaled(weights: &Array2<f32>, row_factor: &Array1<f64>) -> Result<ScoreMatrix> {
    let mut scores = weights.mapv(|w| f64::from(w).abs());
    for (mut row, &f) in scores.axis_iter_mut(Axis(0)).zip(row_factor.iter()) {
        row.mapv_inplace(|a| a * f);
    }
    ScoreMatrix::new(scores)
}

pub fn score_magnitude(weights: &Array2<f32>) -> Result<ScoreMatrix> {
    check_weights(weights)?;
    ScoreMatrix::new(weights.mapv(|w| f64::from(w).abs()))
}

pub fn score_wanda(weights: &Array2<f32>, stats: &ColumnStats) -> Result<ScoreMatrix> {
    check_weights(weights)?;
    check_stats(weights, stats, 1)?;
    row_scaled(weights, &stats.l2())
}

pub fn score_stade(weights: &Array2<f32>, stats: &ColumnStats) -> Result<ScoreMatrix> {
    check_weights(weights)?;
    check_stats(weights, stats, 2)?;
    row_scaled(weights, &stats.centered_l2()?)
}

/// Square root of the plug-in second moment `popvar + mean^2` times `|W|`:
/// the ranking that minimizes the squared output error when the bias may
/// not move.
pub fn score_stade_star(weights: &Array2<f32>, stats: &ColumnStats) -> Result<ScoreMatrix> {
    check_weights(weights)?;
    check_stats(weights, stats, 2)?;
    let factor = stats
        .population_var()
        .iter()
        .zip(stats.mean().iter())
        .map(|(v, mu)| (v + mu * mu).sqrt())
        .collect::<Array1<f64>>();
    row_scaled(weights, &factor)
}

/// Lower Cholesky factor of `a + lambda I`.
fn cholesky(a: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let m = a.nrows();
    let mut l = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            if i == j {
                sum += lambda;
            }
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !sum.is_finite() || sum <= 0.0 {
                    return Err(PruneError::SingularGram { pivot: i, value: sum });
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// `diag((a + lambda I)^-1)` through a Cholesky factorization:
/// with `A = L L^T`, `(A^-1)_jj = ||L^-1 e_j||^2`.
pub fn damped_inverse_diagonal(a: &Array2<f64>, lambda: f64) -> Result<Array1<f64>> {
    if a.nrows() != a.ncols() {
        return Err(PruneError::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let l = cholesky(a, lambda)?;
    let m = a.nrows();
    let mut diag = Array1::<f64>::zeros(m);
    let mut y = vec![0.0f64; m];
    for j in 0..m {
        // Forward substitution for L y = e_j; y[i] = 0 for i < j.
        let mut norm = 0.0;
        for i in j..m {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in j..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
            norm += y[i] * y[i];
        }
        diag[j] = norm;
    }
    Ok(diag)
}

pub fn score_sparsegpt(
    weights: &Array2<f32>,
    gram: &GramAccumulator,
    damping: Damping,
) -> Result<ScoreMatrix> {
    check_weights(weights)?;
    let g = gram.gram();
    if g.nrows() != weights.nrows() {
        return Err(PruneError::DimensionMismatch {
            expected: weights.nrows(),
            found: g.nrows(),
        });
    }
    let lambda = damping.resolve(g);
    let diag = damped_inverse_diagonal(g, lambda)?;
    let mut scores = weights.mapv(|w| f64::from(w).powi(2));
    for (mut row, &d) in scores.axis_iter_mut(Axis(0)).zip(diag.iter()) {
        row.mapv_inplace(|w2| w2 / d);
    }
    ScoreMatrix::new(scores)
}

/// Scores a layer with `criterion`, resolving `StadeW` on the layer's flag.
/// `gram` is only consulted for the SparseGPT score.
pub fn score_layer(
    criterion: Criterion,
    layer: &WeightLayer,
    stats: &ColumnStats,
    gram: Option<&GramAccumulator>,
) -> Result<ScoreMatrix> {
    let w = layer.weights();
    match select_criterion(criterion, layer.centered()) {
        Criterion::Magnitude => score_magnitude(w),
        Criterion::Wanda => score_wanda(w, stats),
        Criterion::Stade => score_stade(w, stats),
        Criterion::StadeStar => score_stade_star(w, stats),
        Criterion::SparseGptScore { damping } => {
            let gram = gram.ok_or_else(|| {
                PruneError::InvalidDimension("sparsegpt-score needs a Gram accumulator".into())
            })?;
            score_sparsegpt(w, gram, damping)
        }
        Criterion::StadeW => unreachable!("stade-w always resolves"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats_of(cols: &[&[f64]]) -> ColumnStats {
        let n = cols[0].len();
        let mut rows = Array2::zeros((n, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                rows[[i, j]] = v;
            }
        }
        ColumnStats::from_batch(&CalibrationBatch::new(rows).unwrap()).unwrap()
    }

    #[test]
    fn magnitude() {
        let s = score_magnitude(&array![[-3.0], [2.0]]).unwrap();
        assert_eq!(s.as_array(), &array![[3.0], [2.0]]);
        let z = score_magnitude(&Array2::zeros((2, 2))).unwrap();
        assert!(z.as_array().iter().all(|&v| v == 0.0));
        let w = array![[1.5f32, -0.25], [-4.0, 0.0]];
        assert_eq!(score_magnitude(&w).unwrap(), score_magnitude(&w.mapv(|x| -x)).unwrap());
        assert!(matches!(
            score_magnitude(&array![[f32::NAN]]),
            Err(PruneError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn wanda_examples() {
        let s = stats_of(&[&[3.0, 4.0]]);
        assert!((score_wanda(&array![[2.0]], &s).unwrap().as_array()[[0, 0]] - 10.0).abs() < 1e-12);
        assert_eq!(score_wanda(&array![[0.0]], &s).unwrap().as_array()[[0, 0]], 0.0);
        let flat = stats_of(&[&[10.0, 10.0]]);
        let v = score_wanda(&array![[0.5]], &flat).unwrap().as_array()[[0, 0]];
        assert!((v - 200f64.sqrt() * 0.5).abs() < 1e-12);
        assert!((v - 7.0711).abs() < 1e-4);
    }

    #[test]
    fn wanda_errors() {
        let s = ColumnStats::new(2).unwrap();
        assert!(matches!(score_wanda(&array![[1.0], [1.0]], &s), Err(PruneError::EmptyStats)));
        let s3 = stats_of(&[&[1.0], &[1.0], &[1.0]]);
        assert!(matches!(
            score_wanda(&array![[1.0], [1.0]], &s3),
            Err(PruneError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stade_examples() {
        let s = stats_of(&[&[1.0, -1.0]]);
        let v = score_stade(&array![[3.0]], &s).unwrap().as_array()[[0, 0]];
        assert!((v - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((v - 4.2426).abs() < 1e-4);
        let flat = stats_of(&[&[10.0, 10.0]]);
        assert_eq!(score_stade(&array![[0.5]], &flat).unwrap().as_array()[[0, 0]], 0.0);
        let one = stats_of(&[&[1.0]]);
        assert!(matches!(
            score_stade(&array![[1.0]], &one),
            Err(PruneError::InsufficientSamples { n: 1, required: 2 })
        ));
        assert!(matches!(
            score_stade_star(&array![[1.0]], &one),
            Err(PruneError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn stade_star_examples() {
        // {1, 7}: mean 4, population variance 9 -> sqrt(9 + 16) * 2 = 10.
        let s = stats_of(&[&[1.0, 7.0]]);
        let v = score_stade_star(&array![[2.0]], &s).unwrap().as_array()[[0, 0]];
        assert!((v - 10.0).abs() < 1e-12);
        // Constant feature keeps the |mean| term.
        let flat = stats_of(&[&[-3.0, -3.0]]);
        let v = score_stade_star(&array![[0.5]], &flat).unwrap().as_array()[[0, 0]];
        assert!((v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sparsegpt_identity_and_diagonal() {
        let g = GramAccumulator {
            gram: Array2::eye(1),
            n: 1,
        };
        let s = score_sparsegpt(&array![[2.0]], &g, Damping::Fixed(0.0)).unwrap();
        assert!((s.as_array()[[0, 0]] - 4.0).abs() < 1e-12);

        let g = GramAccumulator {
            gram: array![[4.0, 0.0], [0.0, 1.0]],
            n: 1,
        };
        let s = score_sparsegpt(&array![[1.0], [1.0]], &g, Damping::Fixed(0.0)).unwrap();
        assert!((s.as_array()[[0, 0]] - 4.0).abs() < 1e-12);
        assert!((s.as_array()[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_gram_without_damping() {
        let g = GramAccumulator {
            gram: array![[1.0, 1.0], [1.0, 1.0]],
            n: 2,
        };
        assert!(matches!(
            score_sparsegpt(&array![[1.0], [1.0]], &g, Damping::Fixed(0.0)),
            Err(PruneError::SingularGram { pivot: 1, .. })
        ));
        assert!(score_sparsegpt(&array![[1.0], [1.0]], &g, Damping::Auto).is_ok());
    }

    #[test]
    fn auto_damping() {
        let g = array![[4.0, 0.0], [0.0, 2.0]];
        assert!((Damping::Auto.resolve(&g) - 0.03).abs() < 1e-15);
        assert_eq!(Damping::Fixed(0.5).resolve(&g), 0.5);
        assert_eq!("auto".parse::<Damping>().unwrap(), Damping::Auto);
        assert_eq!("0.1".parse::<Damping>().unwrap(), Damping::Fixed(0.1));
        assert!("-1".parse::<Damping>().is_err());
    }

    #[test]
    fn gram_accumulates_xtx() {
        let b = CalibrationBatch::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut g = GramAccumulator::new(2).unwrap();
        g.update(&b).unwrap();
        assert_eq!(g.gram(), &array![[10.0, 14.0], [14.0, 20.0]]);
        assert_eq!(g.count(), 2);
    }

    #[test]
    fn stade_w_resolution() {
        assert_eq!(select_criterion(Criterion::StadeW, true), Criterion::Wanda);
        assert_eq!(select_criterion(Criterion::StadeW, false), Criterion::Stade);
        for flag in [true, false] {
            assert_eq!(select_criterion(Criterion::Magnitude, flag), Criterion::Magnitude);
        }
    }

    #[test]
    fn criterion_parsing() {
        for name in ["magnitude", "wanda", "stade", "stade-star", "stade-w", "sparsegpt-score"] {
            assert_eq!(name.parse::<Criterion>().unwrap().name(), name);
        }
        assert!("obs".parse::<Criterion>().is_err());
    }

    #[test]
    fn argmin_ties_go_low() {
        let s = ScoreMatrix::new(array![[2.0], [1.0], [1.0]]).unwrap();
        assert_eq!(s.argmin_in_column(0), 1);
    }
}
