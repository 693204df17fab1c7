use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument outside its valid range, an unknown descriptor, etc.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input file; `offset` is the byte position of the problem.
    #[error("data format error at byte {offset}: {detail}")]
    DataFormat { offset: u64, detail: String },

    /// The activation memory budget cannot be met for some tensor.
    #[error(
        "activation budget infeasible: tensor `{tensor}` has {size} elements, \
         budget {budget} bits gives it less than 1 bit per element"
    )]
    InfeasibleBudget {
        tensor: String,
        size: usize,
        budget: u64,
    },

    /// Non-finite gradients reached the optimizer.
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
