//! Single image dehazing toolkit.
//!
//! The pipeline: synthesize hazy/clear training pairs from clear images and
//! depth maps via the atmospheric scattering model, train a VGG-encoder U-Net
//! with instance normalization on them, and evaluate restored images with
//! PSNR/SSIM. Everything runs on CPU and is deterministic given a seed.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod haze;
pub mod image_io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod optim;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use haze::{HazeParams, HazeRanges};
pub use image_io::{ImageTensor, ModelSpaceTensor};
pub use net::{build_model, Model, ModelConfig, NormKind, Scale, WeightInit};
pub use optim::TrainConfig;
pub use train::{evaluate, run_ablation, Dehazer, EvalReport, IdentityDehazer};
