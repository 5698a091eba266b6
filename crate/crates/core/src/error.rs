use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: u32, num_classes: usize },
    #[error("empty component set")]
    NoComponents,
    #[error("assignment is infeasible: {0}")]
    Infeasible(String),
    #[error("label map has no instance ids")]
    MissingInstances,
    #[error("histogram undefined: mask has zero mass over labeled pixels")]
    ZeroMass,
    #[error("non-finite loss at step {step} (ce {ce}, concept {concept})")]
    NonFiniteLoss { step: usize, ce: f64, concept: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM: {msg}")]
    Pgm { path: PathBuf, msg: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
