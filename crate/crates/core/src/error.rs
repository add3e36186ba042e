use std::fmt;

use thiserror::Error;

/// Errors raised by the detection pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("patch has zero variance")]
    ZeroVariancePatch,
    #[error("image {width}x{height} is smaller than the required {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("map is constant")]
    ConstantMap,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),
    #[error("no recurrent patch found (best frequency {0})")]
    NoRecurrence(usize),
    #[error("correlation map has no positive mass")]
    ZeroMass,
    #[error("patch graph is empty after pruning")]
    EmptyGraph,
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("need at least {needed} clusters, got {got}")]
    TooFewClusters { needed: usize, got: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("trained separator has a zero normal")]
    DegenerateSeparator,
    #[error("operation not allowed in phase {0}")]
    WrongPhase(String),
    #[error("not enough clusters inside the query margin ({0})")]
    InsufficientClusters(usize),
    #[error("responses do not cover the batch: missing cluster {0}")]
    IncompleteResponse(usize),
    #[error("could not place instances after {0} attempts")]
    PlacementFailure(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVariancePatch => "ZeroVariancePatch",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::ConstantMap => "ConstantMap",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::DegenerateBox(_) => "DegenerateBox",
            Error::NoRecurrence(_) => "NoRecurrence",
            Error::ZeroMass => "ZeroMass",
            Error::EmptyGraph => "EmptyGraph",
            Error::EmptyCluster => "EmptyCluster",
            Error::TooFewClusters { .. } => "TooFewClusters",
            Error::SingleClass => "SingleClass",
            Error::DegenerateSeparator => "DegenerateSeparator",
            Error::WrongPhase(_) => "WrongPhase",
            Error::InsufficientClusters(_) => "InsufficientClusters",
            Error::IncompleteResponse(_) => "IncompleteResponse",
            Error::PlacementFailure(_) => "PlacementFailure",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidImage(_) => "InvalidImage",
            Error::Io(_) => "Io",
            Error::Decode(_) => "Decode",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, used to tag errors surfaced by the orchestration layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Rescale,
    Mining,
    Structure,
    Detection,
    Features,
    Classification,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Rescale => "rescale",
            Stage::Mining => "mining",
            Stage::Structure => "structure",
            Stage::Detection => "detection",
            Stage::Features => "features",
            Stage::Classification => "classification",
        };
        f.write_str(s)
    }
}

/// An [`Error`](enum@Error) annotated with the pipeline stage that produced it.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn new(stage: Stage, source: Error) -> Self {
        StageError { stage, source }
    }
}

/// Attach a stage to a fallible result.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError::new(stage, e))
    }
}
