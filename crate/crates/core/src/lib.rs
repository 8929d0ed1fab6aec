//! Deterministic Levenshtein-distance robustness certificates for
//! character-level convolutional text classifiers.
//!
//! - [`text`]: alphabets, tokenization, Levenshtein distance and balls
//! - [`erp`]: ERP distance between real-vector sequences
//! - [`norms`]: induced norms, Lipschitz factors and their subgradients
//! - [`model`]: the classifier, its normalized form and folding
//! - [`checkpoint`]: text checkpoint format
//! - [`training`]: manual backpropagation and SGD with a cyclic schedule
//! - [`verify`]: LipsLev, brute-force and IBP verifiers and reports
//! - [`data`]: CSV ingestion, label maps, splits, synthetic tasks

pub mod checkpoint;
pub mod data;
pub mod erp;
pub mod model;
pub mod norms;
pub mod rng;
pub mod text;
pub mod training;
pub mod verify;

pub use erp::NormOrder;
pub use model::{ConvTextClassifier, LipschitzFactors, Mode, ModelShape};
pub use text::{Alphabet, Sentence};
