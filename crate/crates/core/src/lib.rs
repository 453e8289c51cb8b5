//! Airfoil flow-field surrogate: geometry, potential-flow ground truth,
//! dataset pipeline, a small reverse-mode autodiff engine and a U-Net
//! trained on it.

pub mod dataset;
pub mod evaluation;
pub mod geom;
pub mod oracle;
pub mod tensor;
pub mod training;
pub mod unet;

pub use dataset::{DatasetManifest, FlowSample, Normalizer, ShearMode, Split, Variant};
pub use evaluation::EvalReport;
pub use geom::{AirfoilShape, GridSpec, Mask};
pub use oracle::{FieldTriple, Freestream};
pub use tensor::{Tensor, UpsampleMode};
pub use training::{RunRecord, TrainConfig};
pub use unet::{UNet, UNetConfig};
