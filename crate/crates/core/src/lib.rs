//! Prompt-guided multi-task segmentation of synthetic tissue scenes.
//!
//! The pipeline: [`synth_data`] builds scenes with exact masks, [`task_engine`]
//! turns them into nine set-algebraic targets and prompt text,
//! [`prompt_encoders`] and [`seg_model`] condition a small ViT on those
//! prompts, [`trainer`] fits it and [`eval_harness`] scores it.

use std::path::PathBuf;

pub mod cli;
pub mod eval_harness;
pub mod mask;
pub mod nn;
pub mod prompt_encoders;
pub mod seg_model;
pub mod synth_data;
pub mod task_engine;
pub mod trainer;

pub use mask::Mask;
pub use promptseg_autograd as autograd;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("out of domain: {0}")]
    Domain(String),
    #[error("generation capacity exceeded: {0}")]
    GenerationCapacity(String),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("no valid point for task {task_id}: required foreground is empty")]
    NoValidPoint { task_id: u8 },
    #[error("prompt variant {variant} is not in the {phase} split")]
    SplitViolation { variant: usize, phase: &'static str },
    #[error("prompt bank: {0}")]
    PromptBank(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("sample `{sample_id}`: missing file {}", path.display())]
    MissingFile { sample_id: String, path: PathBuf },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image: {0}")]
    Image(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autograd(#[from] promptseg_autograd::AutogradError),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("missing input: {0}")]
    MissingInput(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
