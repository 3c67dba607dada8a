use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemError {
    #[error("index out of grid: {index} >= {len}")]
    IndexOutOfGrid { index: usize, len: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("memory budget exceeded: N = {n} is above the dense cap of {cap}")]
    MemoryBudget { n: usize, cap: usize },

    #[error("covariance not PD{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    CovarianceNotPd { context: Option<String> },

    #[error("ill-conditioned evidence matrix")]
    IllConditioned,

    #[error("degenerate residual")]
    DegenerateResidual,

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("nonpositive RSS at samples {0:?}")]
    NonPositiveRss(Vec<usize>),

    #[error("negative predictive variance {value:e} at test point {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<RemError>,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<RemError>,
    },
}

impl RemError {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        RemError::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        RemError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the pipeline stage that produced this error, if tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            RemError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = RemError> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(RemError::DimensionMismatch { what, expected, got })
    }
}
