//! Gendered-abuse detection toolkit: multi-annotator corpus ingestion,
//! text preprocessing, pretrained embeddings, a CNN-BiLSTM classifier with
//! hand-written backpropagation, k-fold training and macro metrics.

pub mod autodiff;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
