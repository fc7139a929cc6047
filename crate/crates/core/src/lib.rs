pub mod ahm;
pub mod align;
pub mod attention_align;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod ot;
pub mod phrase;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
