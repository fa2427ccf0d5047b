use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain contains no lattice points at scale {scale}")]
    EmptyDomain { scale: f64 },

    #[error("lattice sites do not form a connected graph ({components} components)")]
    DisconnectedDomain { components: usize },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid temperature: {0}")]
    InvalidTemperature(String),

    #[error("projection onto the boundary is ambiguous at {point:?}")]
    ProjectionAmbiguous { point: Vec<f64> },

    #[error("point {point:?} is not a bath point")]
    NotABathPoint { point: Vec<i64> },

    #[error("point {point:?} is not a lattice site")]
    NotASite { point: Vec<i64> },

    #[error("harmonic solver stopped after {iterations} sweeps with residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("packet chain exceeded the step cap of {cap} events")]
    StepLimitExceeded { cap: u64 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("conditioning event occurred {occurrences} times, need at least {needed}")]
    RareEvent { occurrences: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag used in structured error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDomain { .. } => "EmptyDomain",
            Error::DisconnectedDomain { .. } => "DisconnectedDomain",
            Error::InvalidDomain(_) => "InvalidDomain",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::ProjectionAmbiguous { .. } => "ProjectionAmbiguous",
            Error::NotABathPoint { .. } => "NotABathPoint",
            Error::NotASite { .. } => "NotASite",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::StepLimitExceeded { .. } => "StepLimitExceeded",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::RareEvent { .. } => "RareEvent",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::Io { .. } => "IoFailure",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
