//! Federated two-stage segmentation of intravascular ultrasound frames.
//!
//! Two U-Nets (vessel wall and lumen) are trained with federated averaging
//! across simulated hospital clients on synthetic vessel phantoms; plaque is
//! the wall mask minus the lumen mask.

pub mod error;
pub mod experiment;
pub mod fedavg;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pgm;
pub mod phantom;
pub mod params;
pub mod pipeline;
pub mod polar;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod unet;
pub mod transport;
pub mod weights;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use params::{ModelParams, ParamSpec};
pub use tensor::Tensor;
