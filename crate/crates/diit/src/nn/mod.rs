//! Minimal dense network engine: matrices, layers with hand-derived backward
//! passes, Adam, shared losses, and a finite-difference gradient checker.
//! Everything is 64-bit; gradient checks at 1e-4 tolerance are not reliable
//! in single precision.

pub mod adam;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use layer::{
    log_softmax, sigmoid, softmax, softmax_in_place, Activation, DenseLayer, LayerCache, LayerGrad,
};
pub use loss::{mean_bce, LOG_CLAMP};
pub use matrix::Matrix;
