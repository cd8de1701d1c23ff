//! Core algorithms for box-conditioned GAN data augmentation in lesion
//! detection: phantom data, preprocessing, a progressive-growing conditional
//! WGAN-GP, augmentation sources, a grid detector, and evaluation metrics.

pub mod augment;
pub mod cpggan;
pub mod dataio;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod preproc;
pub mod rng;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use image::GrayImage;
