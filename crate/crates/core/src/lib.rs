//! Layer-importance pruning, hybrid-stream conversion and distillation for a
//! small dual-stream diffusion transformer.

pub mod bench;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod forward;
pub mod gradcheck;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod train;

pub use config::{BlockKind, ModelConfig, StreamLayout};
pub use error::{Error, Result};
pub use forward::{AblationMask, Hidden, HiddenTrace, LayerState, ModelInput};
pub use model::{Block, Model, ParamCount, StreamWeights, Trainable};
