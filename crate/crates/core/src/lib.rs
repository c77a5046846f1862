//! PolyInception-style residual modules as operator polynomials.
//!
//! The crate is organized bottom-up:
//!
//! - [`algebra`]: symbolic module expressions, the cascade rewrite and path dropping
//! - [`dsl`]: architecture description strings and named presets
//! - [`tensor`]: dense tensors, computation graphs and reverse-mode differentiation
//! - [`builder`]: lowering configurations into models, plus model surgery
//! - [`cost`]: analytic parameter and multiply-accumulate counts
//! - [`train`]: RMSProp, step schedule, stochastic paths and the training loop
//! - [`data`]: synthetic dataset and random-resized-crop augmentation
//! - [`eval`]: top-k error and multi-crop top-fraction pooling

pub mod algebra;
pub mod dsl;
pub mod tensor;
pub mod builder;
pub mod cost;
pub mod data;
pub mod eval;
pub mod train;
pub mod rng;

pub use algebra::{AlgebraError, BlockId, ModuleKind, OperatorExpr};
pub use dsl::{NetworkConfig, StageConfig};
