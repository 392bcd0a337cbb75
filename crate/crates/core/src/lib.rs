//! Fine-grained image-text alignment evaluation: instruction corpora for
//! fine-tuning, plus calibrated closed-set scoring of a judge model.
//!
//! The crate is model-agnostic: training corpora are emitted for an external
//! trainer, and inference talks to any [`inference::Backend`] able to report
//! next-token scores for a closed label set.

pub mod dataset;
pub mod image_augment;
pub mod inference;
pub mod instruction;
pub mod metrics;
pub mod pipeline;
pub mod score_codec;
pub mod seeding;

pub use dataset::{
    export_dataset, load_dataset, validate_sample, DatasetSplit, ElementAnnotation, PromptType,
    SamplePair, Split,
};
pub use inference::{Backend, BackendRequest, HitMode, Prediction};
pub use instruction::{BuildOptions, InstructionRecord, Task};
pub use metrics::MetricsReport;
pub use score_codec::{Alphabet, Distribution, ElementCategory, LogitVector, RatingLevel};
