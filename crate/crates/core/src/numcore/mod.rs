//! Numerical substrate: tensors, the autodiff tape, AdamW, the seeded random
//! source and the finite-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, Op, Var};
pub use rng::SeededRng;
pub use tensor::Tensor;
