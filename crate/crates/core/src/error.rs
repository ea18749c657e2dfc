use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite loss {value} at step {step}")]
    Diverged { step: usize, value: f64 },
}
