pub mod autograd;
pub mod backbones;
pub mod distill;
pub mod error;
pub mod eval;
pub mod events;
pub mod gray;
pub mod nn;
pub mod reconstruct;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
