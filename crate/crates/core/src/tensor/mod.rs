//! Minimal reverse-mode tensor engine: dense arrays, a recorded operation
//! graph, the operators the detector needs, and the SGD optimizer.

mod array;
pub mod conv;
mod fpmode;
mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;

pub use array::NdArray;
pub use conv::conv2d;
pub use fpmode::FlushDenormals;
pub use gradcheck::{gradcheck, GradCheckReport, GradSample};
pub use graph::Tensor;
pub use optim::{lr_schedule, sgd_step, SgdConfig, SgdState};

/// Floating-point type of the engine; 64-bit with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Seedable generator threaded through dropout and initializers.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
