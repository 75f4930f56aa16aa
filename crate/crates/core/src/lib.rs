//! Desk-scale cross-lingual pre-training lab.
//!
//! A small reverse-mode autodiff engine drives a GPT-style decoder trained on
//! synthetic parallel languages. Training mixes next-token prediction with a
//! cross-lingual mapping task, and evaluation measures perplexity, layer
//! alignment (LAC), toy translation BLEU and lexicon induction.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{CorpusConfig, Dataset, Lang, SentencePair};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Scalar, Tensor};
pub use tokenizer::Vocab;
pub use trainer::{TrainConfig, Variant};
