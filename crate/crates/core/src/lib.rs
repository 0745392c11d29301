//! Two-stage satellite-to-radar retrieval.
//!
//! A wavelet-aware encoder–decoder turns a stack of satellite observations
//! (visible, two infrared bands, lightning) into a coarse radar field, and a
//! conditional diffusion model refines that estimate. The crate also ships
//! the verification metrics, a synthetic storm generator and the file formats
//! the command-line tool uses.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
#[doc(hidden)]
pub mod testing;
pub mod tensor_file;
pub mod wavelet;
pub mod wtformer;

pub use error::{Error, Result};
pub use raster::{Modality, ObservationStack, Raster};
