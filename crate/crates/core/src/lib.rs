//! Neural codec language model for zero-shot speech synthesis: a residual
//! vector-quantized codec, a phoneme frontend, an autoregressive model for
//! the first code stage and a non-autoregressive model for the rest.

mod binio;

pub mod ar;
pub mod audio;
pub mod cli;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod lm;
pub mod nar;
pub mod pipeline;

pub use binio::file_magic;
pub use error::{Error, Result};
