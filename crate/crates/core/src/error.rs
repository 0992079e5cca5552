use std::io;

use thiserror::Error;

use crate::plan::{OperatorType, ResourceKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed plan document at {path}: {message}")]
    MalformedPlan { path: String, message: String },

    #[error("arity violation at {path}: {op} expects {expected} children, found {found}")]
    Arity { path: String, op: OperatorType, expected: usize, found: usize },

    #[error("invalid value at {path}: {message}")]
    InvalidValue { path: String, message: String },

    #[error("missing table metadata for {0} node")]
    MissingTable(OperatorType),

    #[error("degenerate scaling feature {0}")]
    DegenerateScaling(String),

    #[error("feature {0} referenced by the model is absent from the feature vector")]
    MissingFeature(String),

    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate observations: {0}")]
    DegenerateFit(String),

    #[error("no model for operator {0} ({1})")]
    NoModel(OperatorType, ResourceKind),

    #[error("plan node lacks a {resource} label at {path}")]
    MissingLabel { path: String, resource: ResourceKind },

    #[error("empty template mix")]
    EmptyTemplateMix,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("model file: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
