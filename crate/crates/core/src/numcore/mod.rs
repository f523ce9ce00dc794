//! Training substrate: dense matrices with reverse-mode gradients, the
//! parameter store, AdamW, dropout and seeded randomness.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sparse;
pub mod tape;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck};
pub use optim::{AdamW, AdamWConfig};
pub use params::{xavier_uniform, Parameter, ParameterStore};
pub use rng::{derive_seed, seeded_rng, sub_rng, Rng};
pub use sparse::SparseMatrix;
pub use tape::{dropout, sigmoid, Gradients, Tape, Var};
