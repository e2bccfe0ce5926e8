use std::path::PathBuf;

use navfuse::beamsnet::BeamsNetError;
use navfuse::dvl::DvlError;
use navfuse::ekf::EkfError;
use navfuse::experiments::ExperimentError;
use navfuse::ins::InsError;
use navfuse::metrics::MetricError;
use navfuse::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Row { .. } | HarnessError::Data(_) => 3,
            HarnessError::Divergence(_) => 4,
            HarnessError::Io { .. } => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn row(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        HarnessError::Row {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

impl From<EkfError> for HarnessError {
    fn from(e: EkfError) -> Self {
        match e {
            EkfError::Divergence { .. } | EkfError::Inconsistent { .. } | EkfError::SmallAngleViolation(_) => {
                HarnessError::Divergence(e.to_string())
            }
            EkfError::InvalidRho(_) | EkfError::InvalidNoise(_) | EkfError::NegativeDiagonal { .. } => {
                HarnessError::Config(e.to_string())
            }
            EkfError::Ins(InsError::NonFinite | InsError::RotationTooLarge(_)) => HarnessError::Divergence(e.to_string()),
            _ => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<BeamsNetError> for HarnessError {
    fn from(e: BeamsNetError) -> Self {
        match e {
            BeamsNetError::Diverged { .. } | BeamsNetError::NonFinite(_) => HarnessError::Divergence(e.to_string()),
            BeamsNetError::InvalidConfig(_) => HarnessError::Config(e.to_string()),
            _ => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidProfile(_)
            | SimError::NonPositiveStep(_)
            | SimError::RateMismatch { .. }
            | SimError::NegativeSigma(_) => HarnessError::Config(e.to_string()),
            _ => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<DvlError> for HarnessError {
    fn from(e: DvlError) -> Self {
        match e {
            DvlError::InvalidPitch(_) | DvlError::NegativeSigma(_) => HarnessError::Config(e.to_string()),
            _ => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for HarnessError {
    fn from(e: MetricError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<ExperimentError> for HarnessError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Sim(e) => e.into(),
            ExperimentError::Dvl(e) => e.into(),
            ExperimentError::Ekf(e) => e.into(),
            ExperimentError::Ins(e) => EkfError::Ins(e).into(),
            ExperimentError::BeamsNet(e) => e.into(),
            ExperimentError::Metric(e) => e.into(),
            e @ ExperimentError::InvalidCorrelation { .. } => HarnessError::Config(e.to_string()),
        }
    }
}
