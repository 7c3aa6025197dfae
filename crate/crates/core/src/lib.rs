//! Multimodal (face + voice) dimensional-emotion regression: a 2D convolutional
//! auto-encoder for face crops, a 1D convolutional auto-encoder for audio
//! frames, latent concatenation, and a stacked LSTM predicting arousal and
//! valence, trained jointly with reconstruction and concordance losses.

pub mod data;
pub mod eval;
pub mod model;
pub mod nn;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;
