//! Counting and instance segmentation of sorghum panicles from aerial
//! row-segment imagery.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is a pure
//! function of its inputs: raster arithmetic, regression-target
//! construction, SLIC superpixels, thermal time, a small convolutional
//! density regressor with batch normalization, dihedral test-time
//! augmentation, isotonic correction, density-aware greedy clustering and
//! the evaluation metrics. File formats, the CLI and the annotation service
//! live in the `panicle` crate.
//!
//! Enable the `std` feature to let the GEMM backend pick AVX2, FMA or
//! AVX-512 kernels at runtime.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod augment;
pub mod convnet;
pub mod density;
pub mod error;
pub mod eval;
pub mod grid;
pub mod instseg;
pub mod isotonic;
pub mod slic;
pub mod thermal;

pub use error::{Error, Result};
pub use grid::{Dihedral, PixelCoord, RasterGrid};
