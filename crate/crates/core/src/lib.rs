pub mod ast_attention;
pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod media_ingest;
pub mod objective;
pub mod params;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};
