//! Multi-task knowledge distillation for offensive-language classification.
//!
//! A small transformer student is trained on a main offense task while
//! distilling from single-task teachers on related tasks (emotion, sentiment,
//! sexism), optionally annealing from pure distillation to supervision.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numcore;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{Example, LossKind, TaskId, TaskSpec};
pub use encoder::{ModelConfig, ModelParams};
pub use error::{Error, Result};
pub use numcore::{AdamWConfig, AdamWState, Graph, SeededRng, Tensor, Var};
pub use tokenizer::{TokenBatch, Vocab};
