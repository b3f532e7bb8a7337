//! Herb-and-dosage prescription generation with a small causal language
//! model fine-tuned through low-rank adapters.

pub mod corpus;
pub mod lm;
pub mod metrics;
pub mod prescription;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;
