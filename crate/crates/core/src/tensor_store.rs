//! Binary container for weight layers, calibration activations, masks and
//! statistics.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PRUNEKT1" | u32 manifest length | UTF-8 JSON manifest | payload
//! ```
//!
//! The manifest is `{"tensors": [entry, ...]}` where each entry carries
//! `name`, `shape`, `dtype` (`"f32"` or `"u8"`), `offset` (relative to the
//! start of the payload), `has_bias`, and for weight layers `centered`.
//! Buffers are row-major. A layer's bias is stored as a separate entry named
//! `<layer>.bias`.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};

pub const MAGIC: &[u8; 8] = b"PRUNEKT1";

/// Suffix of the entry holding a layer's bias vector.
pub const BIAS_SUFFIX: &str = ".bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Extra manifest fields carried by weight-layer entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMeta {
    pub centered: bool,
    pub has_bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub layer: Option<LayerMeta>,
}

impl TensorEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    centered: Option<bool>,
    #[serde(default)]
    has_bias: bool,
}

/// One linear layer: `weights` is M×H (inputs × outputs), `bias` has length H.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer {
    pub(crate) weights: Array2<f32>,
    pub(crate) bias: Option<Array1<f32>>,
    pub(crate) centered: bool,
}

impl WeightLayer {
    pub fn new(weights: Array2<f32>, bias: Option<Array1<f32>>, centered: bool) -> Result<Self> {
        let layer = WeightLayer {
            weights,
            bias,
            centered,
        };
        layer.validate("<layer>")?;
        Ok(layer)
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Array1<f32>> {
        self.bias.as_ref()
    }

    /// Bias widened to f64; an absent bias reads as zeros.
    pub fn bias_or_zero(&self) -> Array1<f64> {
        match &self.bias {
            Some(b) => b.mapv(f64::from),
            None => Array1::zeros(self.outputs()),
        }
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if let Some(b) = &self.bias {
            if b.len() != self.outputs() {
                return Err(PruneError::ShapeMismatch {
                    name: format!("{name}{BIAS_SUFFIX}"),
                    detail: format!("bias length {} but layer has {} outputs", b.len(), self.outputs()),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(PruneError::InvariantViolation {
                    name: format!("{name}{BIAS_SUFFIX}"),
                    detail: "non-finite bias entry".into(),
                });
            }
        }
        if self.weights.iter().any(|v| !v.is_finite()) {
            return Err(PruneError::InvariantViolation {
                name: name.to_string(),
                detail: "non-finite weight entry".into(),
            });
        }
        Ok(())
    }
}

/// Ordered collection of named tensors. Entry order is preserved, so two
/// saves of the same container are byte-identical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Names of weight-layer entries, in container order.
    pub fn layer_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.layer.is_some())
            .map(|e| e.name.clone())
            .collect()
    }

    /// Inserts an entry, replacing any existing entry of the same name in place.
    pub fn insert(&mut self, entry: TensorEntry) -> Result<()> {
        if entry.element_count() != entry.data.len() {
            return Err(PruneError::ShapeMismatch {
                name: entry.name,
                detail: format!(
                    "shape {:?} implies {} elements, buffer holds {}",
                    entry.shape,
                    entry.shape.iter().product::<usize>(),
                    entry.data.len()
                ),
            });
        }
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorEntry> {
        let idx = self.entries.iter().position(|e| e.name == name)?;
        Some(self.entries.remove(idx))
    }

    pub fn insert_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(TensorEntry {
            name: name.to_string(),
            shape,
            data: TensorData::F32(data),
            layer: None,
        })
    }

    pub fn insert_u8(&mut self, name: &str, shape: Vec<usize>, data: Vec<u8>) -> Result<()> {
        self.insert(TensorEntry {
            name: name.to_string(),
            shape,
            data: TensorData::U8(data),
            layer: None,
        })
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Array2<f32>) -> Result<()> {
        self.insert_f32(name, vec![m.nrows(), m.ncols()], m.iter().copied().collect())
    }

    pub fn insert_vector(&mut self, name: &str, v: &Array1<f32>) -> Result<()> {
        self.insert_f32(name, vec![v.len()], v.to_vec())
    }

    fn f32_entry(&self, name: &str) -> Result<&TensorEntry> {
        let entry = self.get(name).ok_or_else(|| PruneError::InvariantViolation {
            name: name.to_string(),
            detail: "no such tensor".into(),
        })?;
        match entry.data {
            TensorData::F32(_) => Ok(entry),
            TensorData::U8(_) => Err(PruneError::ShapeMismatch {
                name: name.to_string(),
                detail: "expected dtype f32, found u8".into(),
            }),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let entry = self.f32_entry(name)?;
        let TensorData::F32(data) = &entry.data else {
            unreachable!()
        };
        if entry.shape.len() != 2 {
            return Err(PruneError::ShapeMismatch {
                name: name.to_string(),
                detail: format!("expected rank 2, found shape {:?}", entry.shape),
            });
        }
        Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data.clone()).map_err(|e| {
            PruneError::ShapeMismatch {
                name: name.to_string(),
                detail: e.to_string(),
            }
        })
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f32>> {
        let entry = self.f32_entry(name)?;
        let TensorData::F32(data) = &entry.data else {
            unreachable!()
        };
        if entry.shape.len() != 1 {
            return Err(PruneError::ShapeMismatch {
                name: name.to_string(),
                detail: format!("expected rank 1, found shape {:?}", entry.shape),
            });
        }
        Ok(Array1::from_vec(data.clone()))
    }

    /// Stores a layer as `<name>` plus `<name>.bias` when it has one.
    pub fn insert_layer(&mut self, name: &str, layer: &WeightLayer) -> Result<()> {
        layer.validate(name)?;
        let w = &layer.weights;
        self.insert(TensorEntry {
            name: name.to_string(),
            shape: vec![w.nrows(), w.ncols()],
            data: TensorData::F32(w.iter().copied().collect()),
            layer: Some(LayerMeta {
                centered: layer.centered,
                has_bias: layer.bias.is_some(),
            }),
        })?;
        let bias_name = format!("{name}{BIAS_SUFFIX}");
        match &layer.bias {
            Some(b) => self.insert_vector(&bias_name, b)?,
            None => {
                self.remove(&bias_name);
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<WeightLayer> {
        let entry = self.get(name).ok_or_else(|| PruneError::InvariantViolation {
            name: name.to_string(),
            detail: "no such layer".into(),
        })?;
        let meta = entry.layer.ok_or_else(|| PruneError::InvariantViolation {
            name: name.to_string(),
            detail: "entry is not a weight layer".into(),
        })?;
        let weights = self.matrix(name)?;
        let bias = if meta.has_bias {
            let b = self.vector(&format!("{name}{BIAS_SUFFIX}"))?;
            Some(b)
        } else {
            None
        };
        let layer = WeightLayer {
            weights,
            bias,
            centered: meta.centered,
        };
        layer.validate(name)?;
        Ok(layer)
    }

    /// Checks every manifest-level invariant that does not depend on byte layout.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(PruneError::InvariantViolation {
                    name: e.name.clone(),
                    detail: "duplicate tensor name".into(),
                });
            }
            if e.element_count() != e.data.len() {
                return Err(PruneError::ShapeMismatch {
                    name: e.name.clone(),
                    detail: format!("shape {:?} vs {} elements", e.shape, e.data.len()),
                });
            }
            if let TensorData::F32(v) = &e.data {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(PruneError::InvariantViolation {
                        name: e.name.clone(),
                        detail: "non-finite value".into(),
                    });
                }
            }
        }
        for e in &self.entries {
            let Some(meta) = e.layer else { continue };
            if e.shape.len() != 2 || e.data.dtype() != Dtype::F32 {
                return Err(PruneError::ShapeMismatch {
                    name: e.name.clone(),
                    detail: format!("layer must be a rank-2 f32 tensor, found {:?}", e.shape),
                });
            }
            if meta.has_bias {
                let bias_name = format!("{}{BIAS_SUFFIX}", e.name);
                match self.get(&bias_name) {
                    Some(b) if b.shape == [e.shape[1]] && b.data.dtype() == Dtype::F32 => {}
                    Some(b) => {
                        return Err(PruneError::ShapeMismatch {
                            name: e.name.clone(),
                            detail: format!("bias shape {:?} but layer has {} outputs", b.shape, e.shape[1]),
                        })
                    }
                    None => {
                        return Err(PruneError::ShapeMismatch {
                            name: e.name.clone(),
                            detail: "has_bias set but no bias entry".into(),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: e.data.dtype(),
                offset,
                centered: e.layer.map(|m| m.centered),
                has_bias: e.layer.is_some_and(|m| m.has_bias),
            });
            offset += (e.data.len() * e.data.dtype().size()) as u64;
        }
        let manifest = serde_json::to_vec(&Manifest { tensors })
            .map_err(|e| PruneError::Manifest(e.to_string()))?;
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| PruneError::Manifest("manifest exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(PruneError::MagicMismatch {
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        let header_end = MAGIC.len() + 4;
        if bytes.len() < header_end {
            return Err(PruneError::TruncatedPayload {
                name: "<manifest length>".into(),
                start: MAGIC.len(),
                end: header_end,
                available: bytes.len(),
            });
        }
        let manifest_len =
            u32::from_le_bytes(bytes[MAGIC.len()..header_end].try_into().unwrap()) as usize;
        let manifest_end = header_end + manifest_len;
        if bytes.len() < manifest_end {
            return Err(PruneError::TruncatedPayload {
                name: "<manifest>".into(),
                start: header_end,
                end: manifest_end,
                available: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[header_end..manifest_end])
            .map_err(|e| PruneError::Manifest(e.to_string()))?;
        let payload = &bytes[manifest_end..];

        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for m in manifest.tensors {
            let count = m
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| PruneError::ShapeMismatch {
                    name: m.name.clone(),
                    detail: format!("shape {:?} overflows", m.shape),
                })?;
            let nbytes = count * m.dtype.size();
            let start = usize::try_from(m.offset).unwrap_or(usize::MAX);
            let end = start.saturating_add(nbytes);
            if end > payload.len() {
                return Err(PruneError::TruncatedPayload {
                    name: m.name,
                    start,
                    end,
                    available: payload.len(),
                });
            }
            let raw = &payload[start..end];
            let data = match m.dtype {
                Dtype::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::U8 => TensorData::U8(raw.to_vec()),
            };
            let layer = m.centered.map(|centered| LayerMeta {
                centered,
                has_bias: m.has_bias,
            });
            entries.push(TensorEntry {
                name: m.name,
                shape: m.shape,
                data,
                layer,
            });
        }
        let container = TensorContainer { entries };
        container.validate()?;
        Ok(container)
    }
}

pub fn load_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PruneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorContainer::from_bytes(&bytes)
}

pub fn save_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| PruneError::Io {
        path: path.to_path_buf(),
        source,
    })
}
