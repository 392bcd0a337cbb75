use std::path::PathBuf;

use thiserror::Error;

use tialign_core::dataset::DatasetError;
use tialign_core::image_augment::AugmentError;
use tialign_core::inference::InferenceError;
use tialign_core::instruction::InstructionError;
use tialign_core::metrics::MetricsError;
use tialign_core::pipeline::PipelineError;

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("`{key}` points at {path}, which does not exist")]
    Missing { key: &'static str, path: PathBuf },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn inference_code(e: &InferenceError) -> u8 {
    match e {
        InferenceError::Backend(_) => EXIT_BACKEND,
        InferenceError::Instruction(e) => instruction_code(e),
        _ => EXIT_DOMAIN,
    }
}

fn instruction_code(e: &InstructionError) -> u8 {
    match e {
        InstructionError::Write { .. } => EXIT_IO,
        _ => EXIT_DOMAIN,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Metrics(_) => EXIT_DOMAIN,
            CliError::Missing { .. } | CliError::Io { .. } => EXIT_IO,
            CliError::Dataset(e) => match e {
                DatasetError::Read { .. } | DatasetError::Write { .. } => EXIT_IO,
                _ => EXIT_DOMAIN,
            },
            CliError::Instruction(e) => instruction_code(e),
            CliError::Augment(e) if e.is_io() => EXIT_IO,
            CliError::Augment(_) => EXIT_DOMAIN,
            CliError::Inference(e) => inference_code(e),
            CliError::Pipeline(e) => match e {
                PipelineError::Io { .. } => EXIT_IO,
                PipelineError::Inference(e) => inference_code(e),
                _ => EXIT_DOMAIN,
            },
        }
    }
}

pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}
