use graft_core::align::AlignError;
use graft_core::corpus::CorpusError;
use graft_core::eval::EvalError;
use graft_core::frozen::FrozenError;
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("divergence: {0}")]
    Divergence(String),
    /// Missing or incompatible checkpoint, missing fixtures.
    #[error("mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Integrity(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Mismatch(_) => 6,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Io(e.to_string()),
            CorpusError::InvalidArgument(_) | CorpusError::Geo(_) => CliError::Config(e.to_string()),
            CorpusError::Frozen(inner) => inner.into(),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<FrozenError> for CliError {
    fn from(e: FrozenError) -> Self {
        match e {
            FrozenError::BadTemplate(_) | FrozenError::NoTemplates => CliError::Config(e.to_string()),
            _ => CliError::Mismatch(format!("fixture: {e}")),
        }
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::Divergence { .. } => CliError::Divergence(e.to_string()),
            AlignError::Io { .. } => CliError::Io(e.to_string()),
            AlignError::InvalidTau(_) | AlignError::UnknownVariant(_) | AlignError::InvalidSchedule(_) => {
                CliError::Config(e.to_string())
            }
            AlignError::Frozen(inner) => inner.into(),
            AlignError::Dim { .. } | AlignError::Shape(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::Dim { .. } | EvalError::Shape(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}
