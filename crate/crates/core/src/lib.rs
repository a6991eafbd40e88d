//! nmtd: a CPU beam-search decoding engine for attentional
//! sequence-to-sequence translation models.
//!
//! The engine implements five independently toggleable, output-preserving
//! speedups over a straightforward float baseline — 16-bit fixed-point matrix
//! multiplication, precomputed embedding products, precomputed attention
//! projections, activation lookup tables, and merged recurrent states — plus
//! a target-side architecture that stacks residual fully-connected layers on
//! top of a single attentional GRU.

pub mod cli;
pub mod compute;
pub mod decoder;
pub mod error;
pub mod format;
pub mod lex;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
