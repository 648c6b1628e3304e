pub mod cell;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linear_rnn;
pub mod model;
pub mod ops;
pub mod par;
pub mod params;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
