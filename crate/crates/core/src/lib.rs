//! Cross-domain transfer for heterogeneous graphs at desk scale.
//!
//! The pipeline: generative pre-training on a source graph (masked feature
//! and edge reconstruction over meta-path views), export of the frozen
//! per-view encoder layers as a structure-conditioned expert pool, routing
//! of those experts on a target graph by structural fit with load balancing,
//! and prompt-based fusion of the per-view representations for few-shot node
//! classification. Everything runs on a small tape-based reverse-mode
//! autodiff engine over dense f64 matrices.

pub mod align;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod experts;
pub mod gat;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod split;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{Tape, Unary, Var};
