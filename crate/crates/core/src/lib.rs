//! Differentiable simulation of single-shot Fourier ptychographic microscopy.
//!
//! The LED illumination pattern and a pair of convolutional reconstruction
//! networks are optimized jointly: high-resolution complex objects are imaged
//! through the simulated microscope under the current pattern, corrupted with
//! a Gaussian approximation of shot noise, and decoded back to the complex
//! field. Gradients flow through the whole chain into the LED weights.

pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fourier;
pub mod infotheory;
pub mod network;
pub mod objective;
pub mod optics;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use optics::{
    ComplexField, ForwardModel, IntensityImage, LedGeometry, LedPattern, OpticalConfig, Preset,
    PupilFunction,
};
pub use rustfft::num_complex::Complex64;
