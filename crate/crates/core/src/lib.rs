//! Attention-based multiple instance learning (MIL) with structured
//! instance dropout.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense matrices and a define-by-run reverse-mode autodiff
//!   graph, plus a central finite-difference gradient oracle.
//! * [`models`]: feature extractor, ABMIL / gated ABMIL pooling and the bag
//!   classifier, with dropout hook points after every extractor layer.
//! * [`dropout`]: DropNeuron, DropInstance, attention-guided dropping and
//!   MIL-Dropout (top-k importance plus similar-instance expansion).
//! * [`optim`]: binary cross-entropy, Adam and the per-bag training loop.
//! * [`metrics`]: accuracy / AUC / F1 and cross-validation aggregation.
//! * [`diagnostics`]: gradient direction error, Hessian spectral norm,
//!   epsilon-sharpness and loss-landscape slices.
//! * [`data`]: bag CSV ingestion, a synthetic bag generator and stratified
//!   repeated k-fold splitting.
//! * [`experiment`]: cross-validation and ablation drivers built on the above.
//!
//! Fold-level work is data parallel through [`parallel`]; with the
//! `parallel` feature disabled everything runs sequentially and produces
//! bit-identical results.

pub mod data;
pub mod diagnostics;
pub mod dropout;
mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
