use std::fmt;

use kfusion::{FusionError, LabError, LogError, ManifestError, MetricsError, ModelError, TrainError};

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Validation = 2,
    Divergence = 3,
    Io = 4,
    /// The input is well formed but too small to analyse, such as a
    /// single-epoch log handed to `fuse fit`.
    Degenerate = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Validation, message)
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::new(ExitKind::Io, format!("{}: {err}", path.display()))
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message with `context`, keeping the exit kind.
    pub fn context(self, context: impl fmt::Display) -> Self {
        Self { kind: self.kind, message: format!("{context}: {}", self.message) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<LogError> for CliError {
    fn from(err: LogError) -> Self {
        let kind = match err {
            LogError::Io(_) => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        Self::new(kind, err.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(err: MetricsError) -> Self {
        Self::validation(err.to_string())
    }
}

impl From<FusionError> for CliError {
    fn from(err: FusionError) -> Self {
        let kind = match err {
            FusionError::TooFewEpochs(_) => ExitKind::Degenerate,
            _ => ExitKind::Validation,
        };
        Self::new(kind, err.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        let kind = match err {
            ModelError::Io(_) => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        Self::new(kind, err.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Diverged { .. } => Self::new(ExitKind::Divergence, err.to_string()),
            TrainError::Model(e) => e.into(),
            TrainError::Log(e) => e.into(),
            TrainError::Fusion(e) => e.into(),
            TrainError::Config(_) => Self::validation(err.to_string()),
        }
    }
}

impl From<LabError> for CliError {
    fn from(err: LabError) -> Self {
        match err {
            LabError::Diverged { .. } => Self::new(ExitKind::Divergence, err.to_string()),
            LabError::Model(e) => e.into(),
            _ => Self::validation(err.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(err: ManifestError) -> Self {
        let kind = match &err {
            ManifestError::Io { .. } => ExitKind::Io,
            ManifestError::Log { source: LogError::Io(_), .. } => ExitKind::Io,
            ManifestError::Model { source: ModelError::Io(_), .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        Self::new(kind, err.to_string())
    }
}
