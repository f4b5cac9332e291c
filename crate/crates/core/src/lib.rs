//! Instance normalization in shallow layers plus bias-free feature
//! normalization, on a small from-scratch CPU engine.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod experiment;
mod fsio;
pub mod gradsuite;
pub mod norm;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
