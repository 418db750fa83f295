//! Fiber orientation reconstruction by dictionary-based sparse coding, with a
//! trained unfolded thresholding network on a coarse basis guiding a weighted
//! ℓ1 solve on a dense basis.
//!
//! The crate is `no_std` + `alloc`. The `std` feature (on by default) only
//! adds wall-clock timing to solver reports and `std::error::Error` impls.
//! File formats, the experiment driver and the CLI live in the `fordn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod geometry;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod signal;
pub mod solvers;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{
    angle_deg, build_dictionary, generate_gradient_scheme, make_prolate_tensor,
    tessellate_hemisphere, Dictionary, Direction, DirectionSet, Eigenvalues, GradientScheme,
    ProlateTensor,
};
pub use linalg::Matrix;
pub use signal::FoSet;
