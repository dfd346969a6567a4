use alloc::string::String;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or extents do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A non-finite value was produced or consumed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A call violated an API precondition (empty inputs, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A head annotation lies outside its image.
    #[error("annotation error: point {index} at ({x}, {y}) outside {width}x{height}")]
    Annotation {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;
