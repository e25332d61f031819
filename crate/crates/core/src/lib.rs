//! Off-policy optimization for piecewise-stationary contextual bandits.
//!
//! The pipeline estimates a latent state per logged round (a sliding-window
//! change-point detector or a hidden Markov model), learns one softmax
//! sub-policy per latent state on a clipped importance-weighted objective,
//! and deploys the resulting bundle online by switching between experts.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod changepoint;
pub mod deploy;
pub mod env;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod hmm;
pub mod io;
pub mod kmeans;
pub mod learner;
pub mod linalg;
pub mod model;
pub mod rng;
mod serde_inf;

pub use changepoint::{DetectionResult, DetectorConfig};
pub use deploy::{DeploymentTrace, Exp4sConfig, Exp4sState, PosteriorSamplerState, Switcher};
pub use env::{EnvConfig, EnvSpec, ValueTable};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, EstimatorKind, RewardModel};
pub use experiment::{ExperimentConfig, Method, ReportRow};
pub use hmm::{HmmFitConfig, HmmParams, PosteriorTable};
pub use learner::{ObjectiveKind, PolicyBundle, TrainConfig};
pub use model::{
    ActionSpace, Context, FeatureMap, FeatureMode, LatentSequence, LoggedInteraction, Segment,
    SoftmaxPolicy,
};
pub use rng::SimRng;
