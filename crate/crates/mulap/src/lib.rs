//! Music-and-language pre-training on audio-caption pairs.
//!
//! A two-branch transformer is trained on pairs of music audio and free-text
//! captions with three objectives: masked language modelling, masked audio
//! modelling, and audio-text matching. After pre-training, the CNN audio
//! backbone is frozen and evaluated by training small MLP probes on its
//! features for downstream classification, tagging, and regression tasks.
//!
//! Everything runs on a self-contained f64 tensor engine with reverse-mode
//! automatic differentiation; no external ML framework is used.
//!
//! The `examples/` directory has one runnable program per major capability:
//!
//! ```bash
//! cargo run --release --example generate_corpus
//! cargo run --release --example audio_frontend
//! cargo run --release --example gradient_check
//! cargo run --release --example pretrain_tiny
//! cargo run --release --example transfer_probe
//! cargo run --release --example checkpoint_inspect
//! ```
//!
//! The `mulap` binary wraps the same library behind `gen-data`, `pretrain`,
//! `probe`, and `inspect` subcommands.

pub mod attention;
pub mod audio;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod coattention;
pub mod config;
pub mod corpus;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod text;

pub use tensor::{Tensor, TensorError};
