use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// Device residency would exceed the configured capacity.
    #[error("out of device memory: {required} bytes required, capacity {capacity} bytes")]
    OutOfDeviceMemory { required: u64, capacity: u64 },

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("context overflow: sequence of {len} tokens exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short stable name of the error class, used in CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Contract(_) => "ContractViolation",
            Error::UndefinedCorrelation(_) => "UndefinedCorrelation",
            Error::OutOfDeviceMemory { .. } => "OutOfDeviceMemory",
            Error::Infeasible(_) => "Infeasible",
            Error::ContextOverflow { .. } => "ContextOverflow",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
