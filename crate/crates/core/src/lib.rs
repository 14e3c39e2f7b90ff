//! Few-shot intent classification with in-context learning, retrieval-augmented
//! prompting, cost accounting and LLM-driven data augmentation.

pub mod augmentor;
pub mod corpus;
pub mod embedder;
pub mod evaluator;
pub mod gateway;
pub mod labelspace;
pub mod ledger;
pub mod pipeline;
pub mod promptkit;
pub mod retriever;
