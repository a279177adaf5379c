//! Minimal numerical substrate: row-major `f64` tensors, a reverse-mode tape,
//! pre-norm causal transformer decoders, a token-level MLP language model,
//! optimizers and a checkpoint container.
//!
//! Everything is single-threaded with fixed reduction order, so identical
//! inputs produce bit-identical outputs.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use decoder::{apply_head, decoder_forward, decoder_logits, DecoderConfig, HeadKind};
pub use error::{NnError, Result};
pub use graph::{sigmoid, AttnMask, Grads, Graph, Var};
pub use mlp::{token_mlp_cross_entropy, token_mlp_log_probs, TokenMlpConfig};
pub use optim::{optimizer_step, OptState, OptimizerConfig, OptimizerKind};
pub use params::{loss_and_gradients, Architecture, Bound, NamedTensor, NetworkParams};
pub use tensor::Tensor;
