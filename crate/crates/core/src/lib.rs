//! Classification of 4-D fMRI recordings with recurrent-convolutional
//! networks.
//!
//! The crate bundles everything a run needs: a reverse-mode autodiff tape
//! over dense tensors, 3-D convolution / pooling / LSTM layers, Adam, the
//! volume ingestion and normalization pipeline, SVM baselines, and a
//! subject-disjoint cross-validation harness with a planted-signal data
//! generator.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod svm;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Real, Tensor};
