use thiserror::Error;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GpFit,
    Optimization,
    Ode,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::GpFit => write!(f, "gp-fit"),
            Stage::Optimization => write!(f, "optimization"),
            Stage::Ode => write!(f, "ode"),
        }
    }
}

#[derive(Debug, Error)]
pub enum OdinError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("hyperparameter fitting failed: {message}")]
    Fitting {
        message: String,
        /// Best values seen before giving up: (amplitude, lengthscale, noise_sigma).
        best_effort: Option<(f64, f64, f64)>,
    },

    #[error("integration failed at t = {t}: {message}")]
    Integration { t: f64, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<OdinError>,
    },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl OdinError {
    pub fn at(self, stage: Stage) -> Self {
        OdinError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &OdinError {
        match self {
            OdinError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            OdinError::Io(_) | OdinError::Format(_) => 4,
            OdinError::Input(_) | OdinError::InvalidGrid(_) | OdinError::UnknownSystem(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, OdinError>;
