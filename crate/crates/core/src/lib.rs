//! Recognition-friendly image enhancement built from selective enhancement
//! modules, with a seeded corruption generator, a frozen toy recognizer and
//! recognition-aware training.

pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod corrupt;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grad;
pub mod image_io;
pub mod loss;
pub mod net;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sem;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Mode, Module};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
