//! Environmental sound classification with gammatone log-spectrogram
//! features and an attention-equipped convolutional recurrent network.

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod model;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
