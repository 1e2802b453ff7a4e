//! Low-rank compression of CNN layers with globally budgeted rank selection.
//!
//! The pipeline factorizes every convolution (Tucker-2) and linear layer
//! (truncated SVD) over a grid of ranks, scores each candidate with a local
//! feature-map NMSE proxy and an exact size delta, then picks one rank per
//! layer with an exact multiple-choice knapsack search under a size budget.

pub mod decompose;
pub mod error;
pub mod estimators;
pub mod evbmf;
pub mod infer;
pub mod ir;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
