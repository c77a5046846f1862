//! Operator polynomials over residual blocks.
//!
//! A residual unit computes `(I + F)·x = x + F(x)`. The modules here
//! generalize the additive combination to polynomials such as
//! `I + F + F²` (poly-2), `I + F + GF` (mpoly-2) and `I + F + G` (2-way).

mod expr;
mod polynomial;
mod rewrite;
mod text;

pub use expr::{BlockId, ModuleKind, OperatorExpr};
pub use polynomial::{expand_symbolic, Monomial, Polynomial};
pub use rewrite::{
    block_applications, block_letter, cascade, drop_paths, expand_module, module_form,
    module_monomials, ModuleForm,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("module order must be at least 1")]
    ZeroOrder,
    #[error("module order {0} exceeds the available block letters")]
    OrderTooLarge(u32),
    #[error("residual scaling {0} outside (0, 1]")]
    BadBeta(f64),
    #[error("unknown module kind '{0}'")]
    UnknownKind(String),
    #[error("not a module expression: {0}")]
    NotAModule(String),
    #[error("gate vector has {got} entries, module has {expected} paths")]
    GateLength { expected: usize, got: usize },
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
}
