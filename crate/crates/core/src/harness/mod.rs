//! Prompting, evaluation, data files and experiment runs.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod prompts;
pub mod synthetic;
