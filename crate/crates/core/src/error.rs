use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("cannot pool an empty set of rows")]
    EmptyPool,
    #[error("token {token:?} at position {position} is not in the {vocabulary} vocabulary")]
    Vocabulary {
        vocabulary: &'static str,
        position: usize,
        token: char,
    },
    #[error("invalid pocket: {0}")]
    Pocket(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
}
