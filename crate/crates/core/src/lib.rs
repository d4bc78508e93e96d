//! Semi-supervised adversarial segmentation of 3D pelvic CT volumes.
//!
//! The S-net is a residual U-net with multi-scale pooling and two auxiliary
//! classifiers; a fully convolutional D-net scores image-label products voxel
//! by voxel, and its confidence map drives both an adversarial loss and a
//! self-taught loss on unlabeled volumes. Unlabeled volumes can be synthesized
//! by a progressively grown volumetric GAN. Experiments run on procedural
//! phantoms; [`metrics`] implements DSC, AHD, ASHD and volume difference.

pub mod checkpoint;
pub mod disc;
pub mod error;
pub mod io_util;
pub mod losses;
pub mod metrics;
pub mod pggan;
pub mod segnet;
pub mod seeds;
pub mod trainer;
pub mod voldata;

pub use error::{Error, Result};
