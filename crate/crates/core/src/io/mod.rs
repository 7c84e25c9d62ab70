//! Dataset manifests, synthetic data, and neighbor generation.

pub mod manifest;
pub mod synthetic;
pub mod llm;
