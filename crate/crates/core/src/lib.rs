//! Fine-grained, attention-scaled multi-modal contrastive learning at desk
//! scale: a micro autodiff core, toy encoders, the coarse and fine-grained
//! NCE objectives, a synthetic paired dataset with ground-truth sub-part
//! correspondences, and the training/evaluation loop around them.

pub mod ablation;
pub mod checks;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, ReduceMode, Tensor, Var};
