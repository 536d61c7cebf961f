//! Solver-order hints for GRPO post-training on Sudoku.
//!
//! The crate covers the whole pipeline: puzzle generation with a reference
//! solver ([`sudoku`]), corpora ([`dataset`]), tokenization ([`codec`]), a
//! small transformer ([`nn`]), supervised fine-tuning ([`sft`]), the cell and
//! order rewards with bootstrapped scaling ([`reward`]), GRPO ([`grpo`]) and
//! evaluation ([`eval`]). Independent work items run through [`Execution`],
//! which is rayon-backed when the `parallel` feature is on.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grpo;
pub mod nn;
pub mod reward;
pub mod sft;
pub mod sudoku;
pub mod util;

pub use error::{Error, ErrorClass, Result};
pub use exec::Execution;
