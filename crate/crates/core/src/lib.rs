//! Tooling for fine-tuned-LLM smart contract auditing.
//!
//! * [`solgraph`] recovers a Solidity project's import graph and fills
//!   missing library contracts from a local stub store.
//! * [`dataset`] turns labelled contracts into three-role dialogue records
//!   and splits them into train and test sets.
//! * [`augment`] balances the training labels by random over-sampling.
//! * [`prompts`] renders auditor (basic / chain-of-thought) and verifier
//!   prompts from text templates.
//! * [`finetune`] implements full-parameter and LoRA updates on a toy
//!   attention layer, with exact analytic gradients.
//! * [`model_client`] sends prompts to a chat-completion endpoint or replays
//!   canned responses.
//! * [`eval_metrics`] parses responses and reports per-class and macro
//!   precision, recall and F1.

pub mod augment;
pub mod dataset;
pub mod eval_metrics;
pub mod finetune;
pub mod jsonl;
pub mod label;
pub mod model_client;
pub mod pipeline;
pub mod prompts;
pub mod solgraph;

pub use label::VulnerabilityLabel;
