use std::path::Path;

use dn4dgs::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("training diverged at iteration {iter}; last good parameters saved")]
    Diverged { iter: usize },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Core errors raised while reading user input count as config errors.
    pub fn config(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::DivergedLoss { .. } => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                Error::DivergedLoss { .. } => 3,
                Error::VersionMismatch { .. }
                | Error::Format { .. }
                | Error::InvalidArgument(_)
                | Error::InvalidCamera(_)
                | Error::KTooLarge { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DivergedLoss { iter } => CliError::Diverged { iter },
            other => CliError::Core(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let io = std::io::Error::other("x");
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(Error::DivergedLoss { iter: 3 }).exit_code(), 3);
        assert_eq!(CliError::CheckFailed("x".into()).exit_code(), 4);
        assert_eq!(CliError::from(Error::Io(io)).exit_code(), 1);
        let v = Error::VersionMismatch { expected: 1, found: 2 };
        assert_eq!(CliError::from(v).exit_code(), 2);
    }
}
