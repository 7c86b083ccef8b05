//! Streaming per-feature statistics over calibration activations.
//!
//! The mean follows the batched running update
//! `mean' = mean * n / n' + sum(batch) / n'`. The variance is carried as the
//! centered sum of squares `m2 = (n - 1) * var` and updated with the batch's
//! own centered sum plus the between-batch term `delta^2 * n * b / n'`. That
//! is the same algebra as expanding `n * mean^2 - n' * mean'^2 + sum(x^2)`,
//! without the cancellation that form suffers when `|mean| >> std`.
//! Everything accumulates in f64.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{PruneError, Result};
use crate::tensor_store::TensorContainer;

/// A `b x M` block of calibration activations for one layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    rows: Array2<f64>,
}

impl CalibrationBatch {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(PruneError::NonFiniteInput("calibration batch".into()));
        }
        let rows = if rows.is_standard_layout() {
            rows
        } else {
            rows.as_standard_layout().into_owned()
        };
        Ok(CalibrationBatch { rows })
    }

    pub fn from_f32(rows: &Array2<f32>) -> Result<Self> {
        Self::new(rows.mapv(f64::from))
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    /// Splits off the last `tail` rows: `(head, tail)`.
    pub fn split_tail(&self, tail: usize) -> (CalibrationBatch, CalibrationBatch) {
        let cut = self.len() - tail.min(self.len());
        let head = self.rows.slice(ndarray::s![..cut, ..]).to_owned();
        let rest = self.rows.slice(ndarray::s![cut.., ..]).to_owned();
        (CalibrationBatch { rows: head }, CalibrationBatch { rows: rest })
    }

    /// Contiguous row chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = CalibrationBatch> + '_ {
        self.rows
            .axis_chunks_iter(Axis(0), size.max(1))
            .map(|c| CalibrationBatch { rows: c.to_owned() })
    }
}

/// Running count, mean, variance and raw sum of squares per input feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    n: u64,
    mean: Array1<f64>,
    m2: Array1<f64>,
    sumsq: Array1<f64>,
}

impl ColumnStats {
    pub fn new(features: usize) -> Result<Self> {
        if features == 0 {
            return Err(PruneError::InvalidDimension(
                "statistics need at least one feature".into(),
            ));
        }
        Ok(ColumnStats {
            n: 0,
            mean: Array1::zeros(features),
            m2: Array1::zeros(features),
            sumsq: Array1::zeros(features),
        })
    }

    /// Builds stats from a whole batch in one call.
    pub fn from_batch(batch: &CalibrationBatch) -> Result<Self> {
        let mut s = Self::new(batch.width())?;
        s.update(batch)?;
        Ok(s)
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn sumsq(&self) -> &Array1<f64> {
        &self.sumsq
    }

    /// Sample variance (divisor n - 1); zero when n <= 1, never negative.
    pub fn var(&self) -> Array1<f64> {
        if self.n <= 1 {
            return Array1::zeros(self.features());
        }
        let denom = (self.n - 1) as f64;
        self.m2.mapv(|m| (m / denom).max(0.0))
    }

    /// Population variance (divisor n); zero when n = 0.
    pub fn population_var(&self) -> Array1<f64> {
        if self.n == 0 {
            return Array1::zeros(self.features());
        }
        let denom = self.n as f64;
        self.m2.mapv(|m| (m / denom).max(0.0))
    }

    pub fn update(&mut self, batch: &CalibrationBatch) -> Result<()> {
        if batch.width() != self.features() {
            return Err(PruneError::DimensionMismatch {
                expected: self.features(),
                found: batch.width(),
            });
        }
        if batch.is_empty() {
            return Ok(());
        }
        let rows = batch.view();
        let b = rows.nrows() as f64;
        let sum = rows.sum_axis(Axis(0));
        let batch_mean = &sum / b;
        let m = self.features();
        let mean_s = batch_mean.as_slice().expect("contiguous");
        let mut m2 = vec![0.0f64; m];
        let mut sq = vec![0.0f64; m];
        for row in rows.rows() {
            let row = row.to_slice().expect("row-major batch");
            for (((&x, &mu), a), q) in row.iter().zip(mean_s).zip(m2.iter_mut()).zip(sq.iter_mut()) {
                let d = x - mu;
                *a += d * d;
                *q += x * x;
            }
        }
        self.absorb(rows.nrows() as u64, &sum, &Array1::from(m2), &Array1::from(sq));
        Ok(())
    }

    /// Combines two accumulators built over disjoint shards.
    pub fn merge(&mut self, other: &ColumnStats) -> Result<()> {
        if other.features() != self.features() {
            return Err(PruneError::DimensionMismatch {
                expected: self.features(),
                found: other.features(),
            });
        }
        if other.n == 0 {
            return Ok(());
        }
        let sum = &other.mean * other.n as f64;
        self.absorb(other.n, &sum, &other.m2, &other.sumsq);
        Ok(())
    }

    fn absorb(&mut self, b: u64, sum: &Array1<f64>, m2: &Array1<f64>, sumsq: &Array1<f64>) {
        let n_old = self.n as f64;
        let n_new = (self.n + b) as f64;
        let bf = b as f64;
        for j in 0..self.features() {
            let mean_old = self.mean[j];
            let mean_new = mean_old * n_old / n_new + sum[j] / n_new;
            let delta = sum[j] / bf - mean_old;
            self.m2[j] += m2[j] + delta * delta * n_old * bf / n_new;
            self.mean[j] = mean_new;
            self.sumsq[j] += sumsq[j];
        }
        self.n += b;
    }

    /// `||X[:, j]||_2` per feature.
    pub fn l2(&self) -> Array1<f64> {
        self.sumsq.mapv(|s| s.max(0.0).sqrt())
    }

    /// `||X[:, j] - mean_j||_2 = sqrt((n - 1) var_j)` per feature.
    pub fn centered_l2(&self) -> Result<Array1<f64>> {
        if self.n == 0 {
            return Err(PruneError::EmptyStats);
        }
        Ok(self.m2.mapv(|m| m.max(0.0).sqrt()))
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.mean.iter().fold(0.0, |acc, m| acc.max(m.abs()))
    }

    /// Writes `<layer>.stats.{n,mean,var,sumsq}` as f32 tensors.
    pub fn write_to(&self, container: &mut TensorContainer, layer: &str) -> Result<()> {
        const F32_EXACT: u64 = 1 << 24;
        if self.n > F32_EXACT {
            return Err(PruneError::InvariantViolation {
                name: format!("{layer}.stats.n"),
                detail: format!("count {} not exactly representable as f32", self.n),
            });
        }
        let to32 = |a: &Array1<f64>| a.mapv(|v| v as f32);
        container.insert_f32(&format!("{layer}.stats.n"), vec![1], vec![self.n as f32])?;
        container.insert_vector(&format!("{layer}.stats.mean"), &to32(&self.mean))?;
        container.insert_vector(&format!("{layer}.stats.var"), &to32(&self.var()))?;
        container.insert_vector(&format!("{layer}.stats.sumsq"), &to32(&self.sumsq))?;
        Ok(())
    }

    pub fn read_from(container: &TensorContainer, layer: &str) -> Result<Self> {
        let n = container.vector(&format!("{layer}.stats.n"))?;
        let mean = container.vector(&format!("{layer}.stats.mean"))?.mapv(f64::from);
        let var = container.vector(&format!("{layer}.stats.var"))?.mapv(f64::from);
        let sumsq = container.vector(&format!("{layer}.stats.sumsq"))?.mapv(f64::from);
        let n = n.first().copied().unwrap_or(0.0) as u64;
        if var.len() != mean.len() || sumsq.len() != mean.len() {
            return Err(PruneError::ShapeMismatch {
                name: format!("{layer}.stats"),
                detail: "mean/var/sumsq lengths differ".into(),
            });
        }
        let m2 = var * n.saturating_sub(1) as f64;
        Ok(ColumnStats { n, mean, m2, sumsq })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(values: &[f64]) -> CalibrationBatch {
        CalibrationBatch::new(Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap())
            .unwrap()
    }

    // Running mean plus raw sum of squares, variance recovered at the end.
    // Cancels badly when |mean| >> std, so only used on tame data.
    fn expanded_reference(batches: &[Array2<f64>]) -> (Vec<f64>, Vec<f64>) {
        let m = batches[0].ncols();
        let (mut n, mut mean, mut sq) = (0.0f64, vec![0.0; m], vec![0.0; m]);
        for b in batches {
            let nb = b.nrows() as f64;
            let n_new = n + nb;
            for j in 0..m {
                let sum: f64 = b.column(j).sum();
                mean[j] = mean[j] * n / n_new + sum / n_new;
                sq[j] += b.column(j).iter().map(|v| v * v).sum::<f64>();
            }
            n = n_new;
        }
        let var = (0..m).map(|j| (sq[j] - n * mean[j] * mean[j]) / (n - 1.0)).collect();
        (mean, var)
    }

    #[test]
    fn matches_expanded_form_on_tame_data() {
        let batches = [
            array![[0.5, -1.0], [1.5, 2.0], [-0.25, 0.0]],
            array![[2.0, 1.0]],
            array![[0.0, -3.0], [1.0, 0.5]],
        ];
        let mut s = ColumnStats::new(2).unwrap();
        for b in &batches {
            s.update(&CalibrationBatch::new(b.clone()).unwrap()).unwrap();
        }
        let (mean, var) = expanded_reference(&batches);
        for j in 0..2 {
            assert!((s.mean()[j] - mean[j]).abs() < 1e-12);
            assert!((s.var()[j] - var[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn init() {
        let s = ColumnStats::new(3).unwrap();
        assert_eq!(s.count(), 0);
        assert_eq!(s.mean(), &array![0.0, 0.0, 0.0]);
        assert_eq!(ColumnStats::new(1).unwrap().var(), array![0.0]);
        assert!(matches!(ColumnStats::new(0), Err(PruneError::InvalidDimension(_))));
    }

    #[test]
    fn two_batches_match_two_pass() {
        let mut s = ColumnStats::new(1).unwrap();
        s.update(&col(&[1.0, 2.0, 3.0])).unwrap();
        s.update(&col(&[5.0])).unwrap();
        assert_eq!(s.count(), 4);
        // Two-pass over {1,2,3,5}: mean 2.75, sum of squared deviations 8.75.
        assert!((s.mean()[0] - 2.75).abs() < 1e-12);
        assert!((s.var()[0] - 8.75 / 3.0).abs() < 1e-12);
        assert!((s.sumsq()[0] - 39.0).abs() < 1e-12);
    }

    #[test]
    fn constant_feature() {
        let s = ColumnStats::from_batch(&col(&[7.5, 7.5, 7.5])).unwrap();
        assert_eq!(s.var()[0], 0.0);
        assert_eq!(s.mean()[0], 7.5);
    }

    #[test]
    fn empty_batch_is_identity() {
        let mut s = ColumnStats::from_batch(&col(&[1.0, 4.0])).unwrap();
        let before = s.clone();
        s.update(&CalibrationBatch::new(Array2::zeros((0, 1))).unwrap()).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn width_and_finiteness_checked() {
        let mut s = ColumnStats::new(2).unwrap();
        assert!(matches!(
            s.update(&col(&[1.0])),
            Err(PruneError::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(CalibrationBatch::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn norms() {
        let s = ColumnStats::from_batch(&col(&[3.0, 4.0])).unwrap();
        assert!((s.l2()[0] - 5.0).abs() < 1e-12);
        let zero = ColumnStats::from_batch(&col(&[0.0, 0.0])).unwrap();
        assert_eq!(zero.l2()[0], 0.0);
        let single = ColumnStats::from_batch(&col(&[-2.5])).unwrap();
        assert_eq!(single.l2()[0], 2.5);

        let sym = ColumnStats::from_batch(&col(&[1.0, -1.0])).unwrap();
        assert!((sym.centered_l2().unwrap()[0] - 2f64.sqrt()).abs() < 1e-12);
        let flat = ColumnStats::from_batch(&col(&[10.0, 10.0])).unwrap();
        assert_eq!(flat.centered_l2().unwrap()[0], 0.0);
        assert!(matches!(
            ColumnStats::new(1).unwrap().centered_l2(),
            Err(PruneError::EmptyStats)
        ));
    }

    #[test]
    fn single_row_variance_is_zero() {
        let s = ColumnStats::from_batch(&col(&[3.0])).unwrap();
        assert_eq!(s.var()[0], 0.0);
    }

    #[test]
    fn container_roundtrip() {
        let s = ColumnStats::from_batch(&CalibrationBatch::new(array![[1.0, 2.0], [3.0, -2.0], [5.0, 0.5]]).unwrap())
            .unwrap();
        let mut c = TensorContainer::new();
        s.write_to(&mut c, "fc1").unwrap();
        assert!(c.contains("fc1.stats.mean"));
        let back = ColumnStats::read_from(&c, "fc1").unwrap();
        assert_eq!(back.count(), 3);
        for j in 0..2 {
            assert!((back.mean()[j] - s.mean()[j]).abs() < 1e-6);
            assert!((back.var()[j] - s.var()[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn split_tail() {
        let b = CalibrationBatch::new(array![[1.0], [2.0], [3.0], [4.0], [5.0]]).unwrap();
        let (head, tail) = b.split_tail(2);
        assert_eq!(head.len(), 3);
        assert_eq!(tail.rows()[[0, 0]], 4.0);
        let (all, none) = b.split_tail(0);
        assert_eq!(all.len(), 5);
        assert!(none.is_empty());
    }
}
