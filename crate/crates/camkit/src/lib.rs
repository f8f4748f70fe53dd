//! camkit: channel-adaptive microscopy embedding models, desk scale.
//!
//! A single convolutional embedding model that accepts images with varying
//! channel counts, seven first-layer strategies for making that work, and
//! the nearest-neighbor evaluation pipeline (1-NN cosine search, macro-F1,
//! leave-one-out novel-class scoring, and the CPS summary score) to compare
//! them. Everything runs on CPU: the tensor core, training loop, synthetic
//! data generator, and evaluation engine live in this crate.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example synth_dataset   # generate a varying-channel corpus
//! cargo run --release --example train_strategy  # train one adaptive strategy on it
//! cargo run --release --example embed_and_eval  # embeddings -> 1-NN -> macro-F1 -> CPS
//! cargo run --release --example frontend_zoo    # all seven strategies, parameter/cost table
//! cargo run --release --example tps_augmentation
//! cargo run --release --example knn_engine
//! cargo run --release --example gradient_check
//! ```
//!
//! or with the thin CLI: `camkit synth|check|train|embed|eval|report`.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontends;
pub mod losses;
pub mod model;
pub mod registry;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
