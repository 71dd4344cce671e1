//! Training-free composition of single-modality transformer checkpoints.

pub mod checkpoint;
pub mod compose;
pub mod harness;
pub mod mcub;
pub mod model;
pub mod params;
pub mod search;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdapterConfig, Checkpoint, CheckpointError};
pub use compose::{compose, ComposeError, CompositionReport, MergeSpec, Strategy};
pub use model::{ModelConfig, ModelError, Segment, SegmentedSequence, ToyMLLM};
pub use params::ParameterMap;
pub use search::{enumerate_grid, search, LambdaGrid, SearchError, SearchResult};
pub use tensor::{Tensor, TensorError};
