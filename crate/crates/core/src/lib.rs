//! Per-question mixed-membership phenotyping.
//!
//! Each subject is a mixture over `K` phenotypes; each phenotype holds one
//! categorical distribution per survey question. The crate covers corpus
//! ingest, synthetic cohorts, collapsed Gibbs training, held-out likelihood,
//! interpretation helpers and a small statistical validation battery.

pub mod analytics;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod math;
pub mod model;
pub mod rng;
pub mod schema;
pub mod simulator;
pub mod validation;

pub use corpus::{Corpus, Observation, Subject};
pub use error::{Error, Result};
pub use inference::{train, Hyperparams, ModelState};
pub use model::{FittedModel, TrainConfig, TrainMode};
pub use schema::{Question, QuestionSchema};
pub use simulator::{sample_cohort, GenerativeConfig, GroundTruth};
