//! Score matrix + sparsity target -> prune mask.
//!
//! The comparison group is one output column (all weights feeding one
//! output). Unstructured sparsity prunes the `floor(p * M)` lowest scores of
//! each column; N:M prunes the `n` lowest of every contiguous block of `m`
//! inputs, blocks starting at index 0. Ties go to the lower input index.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::criteria::ScoreMatrix;
use crate::error::{PruneError, Result};
use crate::tensor_store::{TensorContainer, TensorData, WeightLayer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsitySpec {
    Unstructured(f64),
    Structured { n: usize, m: usize },
}

impl SparsitySpec {
    pub fn unstructured(p: f64) -> Result<Self> {
        let spec = SparsitySpec::Unstructured(p);
        spec.check()?;
        Ok(spec)
    }

    pub fn structured(n: usize, m: usize) -> Result<Self> {
        let spec = SparsitySpec::Structured { n, m };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        match *self {
            SparsitySpec::Unstructured(p) if !(0.0..=1.0).contains(&p) => Err(PruneError::InvalidRatio(p)),
            SparsitySpec::Structured { n, m } if n == 0 || n >= m => Err(PruneError::InvalidPattern { n, m }),
            _ => Ok(()),
        }
    }

    /// Checks the pattern against a layer with `rows` inputs.
    pub fn check_for(&self, rows: usize) -> Result<()> {
        self.check()?;
        if let SparsitySpec::Structured { m, .. } = *self {
            if !rows.is_multiple_of(m) {
                return Err(PruneError::IndivisibleGroup { rows, group: m });
            }
        }
        Ok(())
    }

    /// Number of pruned entries per column of `rows` inputs.
    pub fn pruned_per_column(&self, rows: usize) -> usize {
        match *self {
            // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
            SparsitySpec::Unstructured(p) => ((p * rows as f64 + 1e-9).floor() as usize).min(rows),
            SparsitySpec::Structured { n, m } => rows / m * n,
        }
    }
}

impl fmt::Display for SparsitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsitySpec::Unstructured(p) => write!(f, "{p}"),
            SparsitySpec::Structured { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl Serialize for SparsitySpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for SparsitySpec {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        let parse_err = || PruneError::Parse {
            kind: "sparsity",
            value: s.to_string(),
        };
        match s.split_once(':') {
            Some((n, m)) => {
                let n = n.trim().parse().map_err(|_| parse_err())?;
                let m = m.trim().parse().map_err(|_| parse_err())?;
                SparsitySpec::structured(n, m)
            }
            None => SparsitySpec::unstructured(s.trim().parse().map_err(|_| parse_err())?),
        }
    }
}

/// `true` = weight removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask(Array2<bool>);

impl PruneMask {
    pub fn new(mask: Array2<bool>) -> Self {
        PruneMask(mask)
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn pruned_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn sparsity(&self) -> f64 {
        let total = self.0.len();
        if total == 0 {
            0.0
        } else {
            self.pruned_count() as f64 / total as f64
        }
    }

    /// Pruned input indices of output column `m`, ascending.
    pub fn pruned_in_column(&self, m: usize) -> Vec<usize> {
        self.0
            .column(m)
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    /// Stores the mask as an 8-bit 0/1 tensor `<layer>.mask`.
    pub fn write_to(&self, container: &mut TensorContainer, layer: &str) -> Result<()> {
        let (r, c) = self.shape();
        container.insert_u8(
            &format!("{layer}.mask"),
            vec![r, c],
            self.0.iter().map(|&b| u8::from(b)).collect(),
        )
    }

    pub fn read_from(container: &TensorContainer, layer: &str) -> Result<Self> {
        let name = format!("{layer}.mask");
        let entry = container.get(&name).ok_or_else(|| PruneError::InvariantViolation {
            name: name.clone(),
            detail: "no such mask".into(),
        })?;
        let (TensorData::U8(data), [r, c]) = (&entry.data, entry.shape.as_slice()) else {
            return Err(PruneError::ShapeMismatch {
                name,
                detail: "mask must be a rank-2 u8 tensor".into(),
            });
        };
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(PruneError::InvariantViolation {
                name,
                detail: format!("mask byte {bad} is not 0/1"),
            });
        }
        let bits = data.iter().map(|&v| v == 1).collect();
        Ok(PruneMask(Array2::from_shape_vec((*r, *c), bits).expect("validated shape")))
    }
}

/// Indices of the `k` lowest entries, ties broken by lower index.
fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn column_mask(scores: &[f64], spec: SparsitySpec) -> Vec<bool> {
    let mut out = vec![false; scores.len()];
    match spec {
        SparsitySpec::Unstructured(_) => {
            for j in lowest_k(scores, spec.pruned_per_column(scores.len())) {
                out[j] = true;
            }
        }
        SparsitySpec::Structured { n, m } => {
            for (g, group) in scores.chunks(m).enumerate() {
                for j in lowest_k(group, n) {
                    out[g * m + j] = true;
                }
            }
        }
    }
    out
}

pub fn build_mask(scores: &ScoreMatrix, spec: SparsitySpec) -> Result<PruneMask> {
    let (rows, cols) = scores.shape();
    spec.check_for(rows)?;
    let arr = scores.as_array();
    let columns: Vec<Vec<bool>> = (0..cols)
        .into_par_iter()
        .map(|m| column_mask(&arr.column(m).to_vec(), spec))
        .collect();
    let mut mask = Array2::from_elem((rows, cols), false);
    for (m, col) in columns.into_iter().enumerate() {
        for (j, b) in col.into_iter().enumerate() {
            mask[[j, m]] = b;
        }
    }
    Ok(PruneMask(mask))
}

/// First place a mask breaks its sparsity spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskViolation {
    /// The pattern cannot hold on a mask with this many rows.
    Shape { rows: usize, detail: String },
    Count {
        column: usize,
        group_start: usize,
        group_len: usize,
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskViolation::Shape { rows, detail } => write!(f, "{rows} rows: {detail}"),
            MaskViolation::Count {
                column,
                group_start,
                group_len,
                expected,
                found,
            } => write!(
                f,
                "column {column}, rows {group_start}..{}: expected {expected} pruned, found {found}",
                group_start + group_len
            ),
        }
    }
}

pub fn validate_mask(mask: &PruneMask, spec: SparsitySpec) -> std::result::Result<(), MaskViolation> {
    let (rows, cols) = mask.shape();
    if let Err(e) = spec.check_for(rows) {
        return Err(MaskViolation::Shape {
            rows,
            detail: e.to_string(),
        });
    }
    let (group_len, expected) = match spec {
        SparsitySpec::Unstructured(_) => (rows, spec.pruned_per_column(rows)),
        SparsitySpec::Structured { n, m } => (m, n),
    };
    for column in 0..cols {
        let col = mask.0.column(column);
        let col = col.to_vec();
        for (g, group) in col.chunks(group_len.max(1)).enumerate() {
            let found = group.iter().filter(|&&b| b).count();
            if found != expected {
                return Err(MaskViolation::Count {
                    column,
                    group_start: g * group_len,
                    group_len,
                    expected,
                    found,
                });
            }
        }
    }
    Ok(())
}

pub fn is_valid_mask(mask: &PruneMask, spec: SparsitySpec) -> bool {
    validate_mask(mask, spec).is_ok()
}

/// Zeros the masked weights; every other weight and the bias are untouched.
pub fn apply_mask(layer: &WeightLayer, mask: &PruneMask) -> Result<WeightLayer> {
    if mask.shape() != layer.weights.dim() {
        return Err(PruneError::ShapeMismatch {
            name: "mask".into(),
            detail: format!("mask {:?} vs weights {:?}", mask.shape(), layer.weights.dim()),
        });
    }
    let mut out = layer.clone();
    ndarray::Zip::from(&mut out.weights)
        .and(&mask.0)
        .for_each(|w, &pruned| {
            if pruned {
                *w = 0.0;
            }
        });
    Ok(out)
}
