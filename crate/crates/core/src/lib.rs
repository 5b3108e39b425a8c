//! Unsupervised constituency parsing by imitation learning.
//!
//! A structured-attention language model ([`prpn`]) learns per-boundary
//! syntactic distances; [`distance`] turns those into binary trees and into
//! unambiguous composition orders; [`treelstm`] is a pyramid Tree-LSTM parser
//! with discrete composition actions; [`imitation`] clones the language
//! model's trees into the parser step by step and then refines the parser's
//! policy with straight-through Gumbel-Softmax on a sentence-pair task.
//! [`eval`] scores induced trees against reference parses.
//!
//! Everything numeric runs on the small reverse-mode engine in [`autodiff`].

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod distance;
pub mod error;
pub mod eval;
pub mod imitation;
pub mod pipeline;
pub mod prpn;
pub mod render;
pub mod synth;
pub mod treelstm;
pub mod trees;

pub use error::{Error, Result};
