//! Numerical core for studying Edge-of-Stability training dynamics under
//! differential privacy.
//!
//! Everything in this crate is pure computation over owned buffers: a dense
//! tanh MLP with exact gradients and Pearlmutter Hessian-vector products, a
//! quadratic test model, GD/momentum/Adam update rules, the DP gradient
//! pipeline (per-example clipping plus Gaussian noising), matrix-free
//! curvature probes, an RDP accountant, and the instrumented training loop
//! with breakeven detection and behavior classification.
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats, config
//! parsing, and the CLI live in the companion `eoslab` crate. All numerics
//! are f64 with fixed summation order so trajectories are bit-reproducible
//! for a given seed.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod curvature;
pub mod data;
pub mod error;
mod fmath;
pub mod model;
pub mod optim;
pub mod param;
pub mod privacy;
pub mod quadratic;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use param::ParamVector;
