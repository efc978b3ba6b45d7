//! Shortlisting model: a discrete diffusion generative model over
//! candidate sets.
//!
//! The forward process appends spurious candidates to a one-hot until
//! every category is included; the learned reverse process prunes them
//! back down to a single choice. Both directions are multivariate
//! Bernoulli kernels with closed-form marginals and posteriors, trained
//! through the variational lower bound or its cross-entropy surrogates,
//! and sampled ancestrally with optional classifier-free guidance.
//!
//! Modules follow the pipeline: [`types`] and [`schedule`] define the
//! state space and the candidate-count schedule, [`forward`] the
//! corruption kernels, [`predictor`] the trainable and verification
//! models, [`losses`] the objectives, [`sampler`] generation, [`data`]
//! datasets, [`oracle`] independent brute-force checks, and [`cli`] the
//! command-line surface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod losses;
pub mod oracle;
pub mod parallel;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod types;

pub use error::{Result, SlmError};
pub use forward::ForwardKernel;
pub use losses::{ElboMode, ElboReport, LossKind};
pub use predictor::{
    BayesPredictor, FixedTokenPredictor, LinearPredictor, Predictor, PredictorConfig,
    UniformPredictor,
};
pub use sampler::SamplerConfig;
pub use schedule::Schedule;
pub use types::{BernoulliParams, CandidateSet, PredictorOutput, SequenceBatch};
