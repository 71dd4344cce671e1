//! Desk-scale worlds, toy training and evaluation of composed models.

pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod train;
pub mod world;

use thiserror::Error;

use crate::compose::ComposeError;
use crate::model::ModelError;
use crate::search::SearchError;
use crate::tensor::TensorError;

pub use dataset::{generate_dataset, AnswerFormat, DatasetSpec, TaskExample, TaskKind};
pub use eval::{evaluate, EvalOutcome, Extraction};
pub use experiment::{run_composition_experiment, EvalReport, ExperimentConfig, Method};
pub use train::{train_toy_mllm, Stage1Objective, TrainConfig, TrainLog, Variant};
pub use world::{build_synthetic_world, SyntheticWorld, WorldConfig};

pub const EOS: u32 = crate::model::EOS_TOKEN;
/// Instruction padding between the inputs and the question.
pub const FILLER: u32 = 2;
pub const QUESTION: u32 = 3;
pub const ANSWER: u32 = 4;
pub const COMMON: u32 = 5;
/// Letters A to D are `LETTER_BASE..LETTER_BASE + 4`.
pub const LETTER_BASE: u32 = 6;
/// Concept `c` is token `CONCEPT_BASE + c`.
pub const CONCEPT_BASE: u32 = 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("modality {0:?} is not part of the world")]
    UnknownModality(String),
    #[error("model lacks modalities required by the dataset: {0:?}")]
    MissingModalities(Vec<String>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss {loss} in {stage} at step {step} (max |grad| {max_grad})")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        loss: f64,
        max_grad: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn derive_seed(seed: u64, label: &str) -> u64 {
    crate::mcub::fnv1a64(format!("{seed}/{label}").as_bytes())
}
