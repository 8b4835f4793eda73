//! Toy fusion-in-decoder answer generator.

pub mod checkpoint;
pub mod ensemble;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use ensemble::{majority_vote, predict};
pub use model::{EncodedBundle, FusionError, FusionInput, FusionModel, LossReduction, ModelConfig, TokenizedInput};
pub use tensor::Tensor;
pub use tokenizer::Vocab;
pub use train::{train, LossPoint, OptimizerConfig, TrainError, TrainingExample};
