//! Dense linear algebra and MLP building blocks.

pub mod matrix;
pub mod mlp;

pub use matrix::Matrix;
pub use mlp::{Activation, InputGrad, Mlp, MlpParams, MlpSpec, OutputTransform, Tape, TapeInput};
