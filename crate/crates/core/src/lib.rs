//! Interpretability toolkit for probing cultural knowledge in a decoder-only
//! transformer.
//!
//! The pieces, bottom-up:
//!
//! - [`model`]: a small bias-free transformer exposing every residual state
//!   and attention pattern, with greedy decoding.
//! - [`patch`]: capture of hidden states and generation with one residual
//!   coordinate overwritten.
//! - [`pipeline`]: answer generation, noun/verb condensation of the answer's
//!   hidden states, and decoding them through an inspection prompt.
//! - [`filter`]: embedding-similarity scoring of decoded knowledge strings.
//! - [`cf`]: per-country knowledge signatures and the asymmetric cultural
//!   flattening matrix.
//! - [`mcq`]: multiple-choice construction with resource- and region-based
//!   hard negatives.
//! - [`attention`]: attention contribution of option tokens to the final
//!   input token, z-scored and aggregated into group heatmaps.
//! - [`harness`]: prompt schemes, evaluation metrics, file formats and the
//!   end-to-end experiment runner.

pub mod attention;
pub mod cf;
pub mod error;
pub mod filter;
pub mod harness;
pub mod mcq;
pub mod model;
pub mod patch;
pub mod pipeline;

pub use error::{Error, Result};
