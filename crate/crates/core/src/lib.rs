pub mod audio;
pub mod config;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod trainer;

pub use autodiff::{Graph, ParamGroup, ParamStore, Tensor};
pub use config::RunConfig;
pub use dataset::{FeatureSet, Manifest, TrialPair};
pub use error::{Error, ErrorClass, Result};
pub use evaluator::{ProbeReport, ScoredTrial, VerificationReport};
pub use networks::{Branch, Model, ModelConfig};
pub use trainer::{Ablation, TrainConfig, Trainer};
