//! Dense linear algebra, seeded randomness and reverse-mode differentiation.

pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use linalg::{op_norm, projector_distance, svd, sym_eig, truncated_svd, EigenFactors, SvdFactors};
pub use matrix::Matrix;
pub use rng::SeedStream;
pub use tape::{Gradients, ParamId, Tape, Var};
