//! Knowledge-infused attention for sentence-pair relevance modeling.
//!
//! Lexical relations from a WordNet-style knowledge base raise the
//! co-attention scores of related word pairs; the resulting prior matrix
//! modulates a second attention path inside every head, and an adaptive
//! fusion network (mutual alignment, gated fusion, filtration gate) merges
//! the plain and knowledge-modulated paths. Every reverse-mode rule is
//! written by hand and verified by central finite differences.
//!
//! The math is generic over [`Scalar`] (`f32`/`f64`); the aliases below fix
//! the crate's working precision, `f64`.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod kattn;
pub mod lexkb;
pub mod numcore;
pub mod prior;
pub mod robustness;
pub mod scalar;
pub mod textio;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of models, checkpoints and the CLI.
pub type Real = f64;
pub type Mat = numcore::Matrix<Real>;
pub type Params = numcore::ParamStore<Real>;
pub type Model = encoder::ModelState<Real>;
