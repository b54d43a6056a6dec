//! Masked, parametric-bias-conditioned correlational network for learning and
//! adapting a robot body schema from multimodal sensor data.

pub mod anomaly;
pub mod config;
pub mod error;
pub mod inference;
pub mod iteropt;
pub mod modality;
pub mod model;
pub mod net;
pub mod online;
pub mod scenarios;
pub mod structure;
pub mod testbed;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::{MaskSet, MaskVector, ModalityLayout, Normalizer};
pub use model::{ArchConfig, GeMuCoModel, LatentState, ParametricBias};
pub use trainer::{Dataset, Sample, TrainConfig, TrainReport};
