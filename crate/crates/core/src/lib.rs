//! Cloud masking for 4-band (Red, Green, Blue, Nir) satellite scenes.
//!
//! The pipeline has three parts:
//!
//! * [`correction`] cleans default QA-derived cloud ground truths by
//!   thresholding the Sobel gradient magnitude of the blue band, which is
//!   high over snow and ice texture and low over cloud.
//! * [`unet`] and [`training`] define a U-Net style fully convolutional
//!   network (six encode blocks, five decode blocks) trained from scratch with
//!   a soft Jaccard loss and Adam.
//! * [`patch`] tiles scenes into fixed-size patches for inference and stitches
//!   the per-patch probability maps back into a scene mask; [`metrics`] scores
//!   masks against a reference.

pub mod correction;
pub mod error;
pub mod metrics;
pub mod patch;
pub mod raster;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
