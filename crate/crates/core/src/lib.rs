//! Directional-consistent merging of task-adapted weight matrices.
//!
//! Task vectors are split into rank-one knowledge components, their energy
//! distribution is smoothed, and all tasks are merged inside a shared,
//! whitened cover space before being mapped back to parameter space.

pub mod cli;
pub mod container;
pub mod cover;
pub mod error;
pub mod extract;
pub mod linalg;
pub mod merge;
pub mod optimizer;
pub mod perturb;
pub mod similarity;
pub mod task_vector;

pub use container::{read_container, write_container, Dtype, Tensor, TensorContainer};
pub use cover::{back_project, build_cover_basis, make_mask, project, CoverBasis, StructuralMask};
pub use error::{Error, Result};
pub use extract::{extract_task_vectors, ExtractedTask};
pub use linalg::{truncated_svd, whiten, Matrix, SvdTriplet};
pub use merge::{assemble_model, dc_merge, merge_ta, merge_ties, MergeConfig, MergeOutcome};
pub use optimizer::{optimize_cover_basis, OptimizationTrace, OptimizerConfig};
pub use perturb::{direction_perturb, energy_perturb};
pub use similarity::{alignment_score, cos_sim, dir_sim, projected_dir_sim};
pub use task_vector::{decompose, smooth_energy, KnowledgeDecomposition, Mode, SmoothingStrategy, TaskVector};
