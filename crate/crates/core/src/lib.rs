pub mod codec;
pub mod conditioning;
pub mod dsp;
pub mod flow;
pub mod synthdata;
pub mod trainer;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod util;

pub use error::{Error, Result};
