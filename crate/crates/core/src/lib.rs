//! Adversarial dropout for recurrent networks.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod masks;
pub mod regularizers;
pub mod rnn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
