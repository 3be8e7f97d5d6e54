//! InfoStyler: artistic style transfer with content and style information
//! bottlenecks inserted into a frozen VGG-19 feature encoder.
//!
//! The pipeline is encoder -> bottleneck -> transfer -> decoder, trained
//! with information, content, style and cycle-reconstruction losses.

pub mod archive;
pub mod bottleneck;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use bottleneck::{mi_scalar, mutual_information, BranchKind, Noise, NoiseMode};
pub use encoder::{encode, EncoderArch, EncoderWeights};
pub use error::{Error, Result};
pub use losses::{Lambdas, LossReport};
pub use model::{Model, ModelConfig};
pub use tensor::{FeatureMap, FeaturePyramid, ImageTensor, Level};
pub use training::{TrainConfig, TrainState};
