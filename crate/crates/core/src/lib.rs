//! Unitary group convolutions: group convolutions composed with unitary
//! channel-space transforms (permutations, Hadamard, Fourier, random
//! orthogonal), the block-circulant layers they are equivalent to, a small
//! training engine for the toy-MNIST ablation, and a static cost model for
//! parameter/multiply/add accounting.
//!
//! All numerics are generic over the scalar type via `scalar::Real` /
//! `scalar::Scalar`; the aliases below fix the double-precision
//! instantiation the test suites and the CLI use.

pub mod archs;
pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod layers;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod transforms;
pub mod ugconv;
pub mod verify;
pub mod workflows;


pub use error::{Error, Result};

/// Default real scalar.
pub type Real64 = f64;
/// Default complex scalar.
pub type Complex64 = num_complex::Complex<f64>;
/// Real activation/weight tensor in the default precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Complex tensor in the default precision (Fourier paths).
pub type TensorC64 = tensor::Tensor<Complex64>;
