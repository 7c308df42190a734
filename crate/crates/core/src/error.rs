use std::io;

/// Errors raised by the distillation pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Two inputs that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A value violates a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid configuration (unknown scene spec, sigma outside [0, 1], ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// The noise schedule is degenerate at the requested timestep.
    #[error("degenerate timestep t={t}: {reason}")]
    DegenerateTimestep { t: f64, reason: &'static str },
    /// A gradient or parameter became NaN or infinite.
    #[error("non-finite value at iteration {iteration}, view {}: {detail}", view.map_or("aggregate".to_string(), |v| v.to_string()))]
    NonFinite {
        iteration: usize,
        /// `None` when the aggregated update is at fault.
        view: Option<usize>,
        detail: String,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
