//! Adversarially trained variational autoencoder with a convolutional latent
//! variable, whose Grad-CAM attention is supervised during training, for
//! unsupervised and weakly-supervised anomaly localization.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::Tensor;
