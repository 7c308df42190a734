use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing in {}: {}", dir.display(), missing.join(", "))]
    Missing { dir: PathBuf, missing: Vec<String> },
    #[error("malformed metrics line {line}: {detail}")]
    Metrics { line: usize, detail: String },
    #[error(transparent)]
    Core(#[from] mvdistill_core::Error),
}

impl CliError {
    /// Process exit status: 2 configuration, 3 numerical abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use mvdistill_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Missing { .. } | CliError::Metrics { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) | E::ShapeMismatch(_) => 2,
                E::NonFinite { .. } | E::DegenerateTimestep { .. } => 3,
                E::Io(_) | E::Image(_) | E::Format(_) => 4,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
