#![cfg_attr(not(feature = "std"), no_std)]

//! Core library for a hierarchical mixture-of-experts model over 2D pose
//! sequences.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature enables
//! the std-backed RNG conveniences and is on by default. All numeric results
//! are bitwise identical across both configurations: every inexact
//! transcendental routes through the same software implementations.

extern crate alloc;

pub mod loss;
pub mod math;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
