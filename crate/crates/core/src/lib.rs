pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pgm;
pub mod psnm;
pub mod rsm;
pub mod superpixel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
