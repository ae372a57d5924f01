//! Byte-level decoder-only transformer with optional folding modules in the residual
//! stream.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod generate;
pub mod params;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{folding_module_apply, forward, logits, loss, ForwardTrace};
pub use generate::{generate, Decoding};
pub use params::{LayerParams, Parameters};
pub use tokenizer::{detokenize, tokenize, BYTE_VOCAB};
pub use train::{loss_and_grads, train_step, AdamConfig, OptimizerState};
