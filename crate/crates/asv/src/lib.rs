//! Sentence representations from an asymmetric encoder-decoder: a
//! bi-directional GRU reads each sentence and pools its hidden states into
//! a fixed vector, and a non-autoregressive convolutional decoder is
//! trained to predict the words that follow the sentence in the corpus —
//! all positions at once, scored against a word-prediction layer that
//! shares its matrix with the input embeddings. After training, only the
//! encoder is kept and the vectors serve as frozen features.
//!
//! Everything runs on the CPU over a small reverse-mode tape ([`tape`]);
//! training arithmetic is `f32` and the gradient checker replays the same
//! graph in `f64` ([`gradcheck`]).
//!
//! ## Examples
//!
//! Each major capability has a runnable example:
//!
//! - **`train_toy`** — corpus in, checkpoint out: vocabulary, training
//!   loop, loss trajectory, reload, encode.
//! - **`decoder_variants`** — the predict-all-words CNN/RNN and
//!   autoregressive RNN/CNN decoders (with all three input-sampling
//!   strategies) feeding the same tied prediction head.
//! - **`gradient_check`** — finite-difference verification of every
//!   decoder variant's gradients in `f64`.
//! - **`decoder_speed`** — wall-clock per training step across decoders.
//! - **`vocab_expansion`** — least-squares map from pretrained vectors
//!   into the learnt embedding space; encode sentences with unseen words.
//! - **`nearest_neighbors`** — cosine retrieval over frozen vectors.
//! - **`transfer_probe`** — logistic probe on frozen representations,
//!   trained vs untrained encoder.
//!
//! ```bash
//! cargo run --release -p asv --example train_toy
//! ```
//!
//! The `asv` binary wraps the same library as subcommands (`build-vocab`,
//! `train`, `encode`, `expand`, `eval-sim`, `eval-cls`, `nn`).

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod expand;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
