use thiserror::Error;

/// Failures reading, writing or constructing a [`PredictionLog`](crate::log::PredictionLog).
#[derive(Debug, Error)]
pub enum LogError {
    #[error("bad magic {0:?}, expected \"KFPL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown flag bits {0:#x}")]
    UnknownFlags(u32),
    #[error("invalid split tag {0}")]
    InvalidSplitTag(u32),
    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated { section: &'static str, expected: usize, actual: usize },
    #[error("trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("noise mask padding bits are set")]
    MaskPadding,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} of example {example} is outside [0, {classes})")]
    LabelOutOfRange { example: usize, label: u32, classes: usize },
    #[error("probability {value} at epoch {epoch}, example {example} is outside [0, 1]")]
    ProbabilityOutOfRange { epoch: usize, example: usize, value: f32 },
    #[error("probabilities at epoch {epoch}, example {example} sum to {sum}")]
    SimplexViolation { epoch: usize, example: usize, sum: f64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for LogError {
    fn from(err: csv::Error) -> Self {
        if !err.is_io_error() {
            return LogError::Csv(err.to_string());
        }
        match err.into_kind() {
            csv::ErrorKind::Io(io) => LogError::Io(io),
            other => LogError::Csv(format!("{other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log has no noise mask")]
    MissingNoiseMask,
    #[error("reference epoch {epoch} out of range for {epochs} epochs")]
    ReferenceOutOfRange { epoch: usize, epochs: usize },
    #[error("loss threshold must be positive, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("knowledge fusion needs at least 2 epochs, log has {0}")]
    TooFewEpochs(usize),
    #[error("epsilon grid step must be in (0, 1], got {0}")]
    BadEpsStep(f64),
    #[error("epsilon {0} outside [0, 1]")]
    BadEpsilon(f64),
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("window {center}±{window} leaves the recorded {epochs} epochs")]
    WindowOutOfRange { center: usize, window: usize, epochs: usize },
    #[error("ensemble size must be in 1..={max}, got {k}")]
    BadCount { k: usize, max: usize },
    #[error("selected epochs {0} and {1} are closer than 2 apart")]
    EpochsTooClose(usize, usize),
    #[error("plan json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("weights json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("unstable step size: gamma * s_max * depth = {0} >= 1")]
    Unstable(f64),
    #[error("gradient descent diverged at step {step}: separator norm {norm} exceeds 10x initial {initial}")]
    Diverged { step: usize, norm: f64, initial: f64 },
    #[error("invalid lab input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Invalid(String),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Log { path: String, source: LogError },
    #[error("{path}: {source}")]
    Model { path: String, source: ModelError },
    #[error("{path}: {source}")]
    Plan { path: String, source: FusionError },
}
