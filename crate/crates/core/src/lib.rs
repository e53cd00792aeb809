pub mod compositing;
pub mod datagen;
pub mod error;
pub mod imageio;
pub mod numerics;
pub mod pipeline;
pub mod rim;
pub mod service;
pub mod training;

pub use error::{Error, Result};
