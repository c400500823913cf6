//! Sentence compression with a discrete latent variable: a pointer-network
//! compressor, an attentive reconstruction model and a language-model prior,
//! trained from labelled pairs, unlabelled sentences or both.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsc;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
