//! Cross-lingual emotion classification with LLM prompting strategies,
//! multi-agent adjudication workflows, embedding KNN, ensembles and
//! evaluation.

pub mod cli;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod gateway;
pub mod knn;
pub mod label;
pub mod prompts;
pub mod strategies;
pub mod workflows;

pub use label::{parse_explained_output, parse_label, parse_yes_no, EmotionLabel, Instance, ModelId, ParseError, Prediction};
