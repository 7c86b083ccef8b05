//! Post-training weight pruning driven by calibration-activation statistics.
//!
//! Modules, bottom-up:
//!
//! - [`tensor_store`]: the `PRUNEKT1` container format and [`WeightLayer`].
//! - [`calib_stats`]: streaming per-feature mean / variance / sum of squares.
//! - [`criteria`]: magnitude, Wanda, STADE, STADE*, STADE-W and SparseGPT scores.
//! - [`mask_builder`]: unstructured and N:M masks from scores.
//! - [`compensator`]: closed-form bias update for pruned inputs.
//! - [`pruner`]: whole-container pipeline and per-layer report.
//! - [`oracle`]: brute-force single-weight pruning and optimality checks.
//! - [`harness`]: synthetic MLPs and seed-swept criterion comparison.
//! - [`cli`]: the `prunekit` command line.

pub mod calib_stats;
pub mod cli;
pub mod compensator;
pub mod criteria;
pub mod error;
pub mod harness;
pub mod mask_builder;
pub mod oracle;
pub mod pruner;
pub mod tensor_store;

pub use calib_stats::{CalibrationBatch, ColumnStats};
pub use criteria::{Criterion, Damping, GramAccumulator, ScoreMatrix};
pub use error::{PruneError, Result};
pub use mask_builder::{PruneMask, SparsitySpec};
pub use pruner::{PruneOptions, PruneReport};
pub use tensor_store::{load_container, save_container, TensorContainer, WeightLayer};
