//! Parallelized autoregressive generation for grid-structured token
//! sequences.
//!
//! Grid tokens are reordered so that the initial token of every region is
//! generated sequentially (establishing global structure) and tokens at
//! matching positions across distant regions are generated in parallel
//! groups inside a standard causal transformer. The crate covers the whole
//! pipeline at desk scale: order construction ([`order`]), the model-facing
//! sequence layout and group-wise attention masks ([`layout`]), coordinate-
//! keyed rotary embeddings ([`rope`]), a from-scratch transformer with
//! training loop ([`model`], [`train`]), KV-cached chunked decoding with
//! classifier-free guidance ([`decode`]), conditional-entropy dependency
//! analysis ([`entropy`]), synthetic data plus quality proxies
//! ([`synthetic`], [`quality`]), benchmarking ([`bench`]), and persistence
//! ([`io`]).
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `par` binary for the command-line interface.

pub mod bench;
pub mod decode;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod io;
pub mod layout;
pub mod linalg;
pub mod model;
pub mod order;
pub mod quality;
pub mod real;
pub mod render;
pub mod rng;
pub mod rope;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Coord, GridShape, TokenGrid};
pub use layout::{build_attention_mask, build_sequence_layout, AttentionMask, SequenceLayout};
pub use model::{init_model, Model, ModelConfig};
pub use order::{build_order_plan, step_count, OrderPlan};
