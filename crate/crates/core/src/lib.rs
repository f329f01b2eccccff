//! GetNet: a scale-and-translate spatial transformer in front of a
//! weight-sharing Siamese network, trained with contrastive loss.
//!
//! Tensors are generic over [`Scalar`] (`f32` or `f64`); every layer has a
//! hand-written backward pass that the [`gradcheck`] suite verifies.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod siamese;
pub mod stn;
pub mod tensor;
pub mod training;

pub use checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint};
pub use data::{LabeledImage, PairIndex, PairSample};
pub use error::{Error, Result};
pub use nn::{LayerSpec, Network};
pub use siamese::{contrastive_loss, Margin, PairLabel};
pub use stn::{AffineParams, BBox, SampleGrid, StnConfig};
pub use tensor::{Precision, Scalar, Tensor};
pub use training::{Evaluation, MetricsRecord, Mode, ModelConfig, ModelState, Phase, TrainConfig};
