//! Synthetic psychiatric diagnosis dialogues from masked patient cases.

pub mod agents;
pub mod case_prep;
pub mod dataset;
pub mod diagtree;
pub mod domain;
pub mod error;
pub mod expgen;
pub mod llm;
pub mod orchestrator;
pub mod prompts;
