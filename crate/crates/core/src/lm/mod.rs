//! Byte-level decoder-only language model with alternating MoE blocks.

mod config;
mod data;
mod eval;
mod model;
mod train;

pub use config::{ModelConfig, MoeSpec, BYTE_VOCAB};
pub use data::{byte_ids, load_corpus, synthetic_corpus, BatchSampler, TokenBatch};
pub use eval::{evaluate, evaluate_perplexity, EvalOptions, EvalReport};
pub use model::{ForwardPass, LayerTrace, Model};
pub use train::{train, train_with, StepRecord, TrainConfig, TrainReport};
