//! Continual soft-prompt tuning over a frozen transformer encoder.
//!
//! A miniature encoder is pre-trained with masked-token prediction and then
//! frozen. Each data source (a "generator" of news articles) gets its own
//! trainable soft prompt; prompts are frozen after their task and stacked in
//! front of every later input, so the classifier sees `[P_k; …; P_1; X]`.
//! Full fine-tuning baselines, the forgetting metric, a synthetic
//! multi-generator corpus and a zero-shot chat-completion baseline live
//! alongside.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub(crate) mod io;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use tensor::{Adam, AdamConfig, Gradients, ParamId, Parameter, Tape, Tensor, Var};
pub use metrics::{AccuracyMatrix, ExperimentReport};
pub use prompt::{PositionMode, PromptBank, SoftPrompt};
pub use trainer::{Classifier, ModelState, TrainConfig};
