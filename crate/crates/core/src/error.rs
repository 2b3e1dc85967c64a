use std::io;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed scan: {0}")]
    MalformedScan(String),

    #[error("malformed labels: {0}")]
    MalformedLabels(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("degenerate point: zero horizontal range and zero height above the beam origin")]
    DegeneratePoint,

    #[error("empty group at cell (v={v}, u={u})")]
    EmptyGroup { v: usize, u: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weights format error: {0}")]
    Format(String),

    #[error("label {id} at index {index} is out of range")]
    Label { index: usize, id: u32 },

    #[error("numeric instability in `{op}`")]
    NumericInstability { op: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
