//! Dense tensors, convolution kernels, and the reverse-mode tape that the
//! network is trained with.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod gru;
pub mod spectral;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamSlot, Moments};
pub use autodiff::{Gradients, Tape, Var};
pub use conv::{conv2d, conv_transpose2d, ConvGeometry};
pub use gru::{gru_conv_cell, gru_conv_cell_tape, ConvParams, GruGates, GruVars};
pub use spectral::{spectral_normalize, SpectralEstimate, SpectralState, WeightLayout};
pub use tensor::Tensor;
