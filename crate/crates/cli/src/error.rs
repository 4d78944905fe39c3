use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] latgeo_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 0 ok, 1 bad input, 2 numeric failure, 3 I/O failure.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Input(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Core(latgeo_core::Error::Io(_)) => 3,
            CliError::Core(_) => 1,
        };
        ExitCode::from(code)
    }
}
