//! Fitted point estimates and the checkpoint file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Observation, Subject};
use crate::error::{Error, Result};
use crate::inference::Hyperparams;
use crate::schema::QuestionSchema;

pub const CHECKPOINT_FORMAT: &str = "mmpheno-checkpoint-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One response distribution per (phenotype, question).
    PerQuestion,
    /// Vanilla LDA baseline: all questions merged into one vocabulary.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            burn_in: 1000,
            thin: 10,
            seed: 0,
            mode: TrainMode::PerQuestion,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters <= self.burn_in {
            return Err(Error::Config(format!(
                "iters ({}) must exceed burn-in ({})",
                self.iters, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Estimated by the sampler.
    Fitted,
    /// Parameters drawn by the simulator.
    GroundTruth,
}

/// Point estimates of the response distributions `theta[k][q][v]` and the
/// per-subject phenotype proportions `phi[s][k]`.
///
/// `schema` is the schema the parameters live in; for pooled models that
/// is the merged single-question schema and `source_schema` is the one
/// the training corpus was bound to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub mode: TrainMode,
    pub schema: QuestionSchema,
    pub source_schema: QuestionSchema,
    pub hyperparams: Hyperparams,
    pub theta: Vec<Vec<Vec<f64>>>,
    pub phi: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
    pub training: Option<TrainConfig>,
    /// Per-subject phenotype labels, present for ground truth.
    pub assignments: Option<Vec<Vec<u32>>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    schema_hash: String,
    model: FittedModel,
}

impl FittedModel {
    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn schema_hash(&self) -> &str {
        self.schema.hash()
    }

    pub fn theta_row(&self, k: usize, q: usize) -> &[f64] {
        &self.theta[k][q]
    }

    pub fn subject_position(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }

    /// Shape and normalisation checks (rows sum to 1 within 1e-9).
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Model("model has no phenotypes".into()));
        }
        if self.hyperparams.k() != k {
            return Err(Error::Model("alpha length differs from K".into()));
        }
        self.hyperparams.validate(&self.schema)?;
        let sizes = self.schema.vocab_sizes();
        for (ki, rows) in self.theta.iter().enumerate() {
            if rows.len() != sizes.len() {
                return Err(Error::Model(format!("theta[{ki}] has wrong question count")));
            }
            for (q, row) in rows.iter().enumerate() {
                if row.len() != sizes[q] || !is_distribution(row) {
                    return Err(Error::Model(format!("theta[{ki}][{q}] is not a distribution")));
                }
            }
        }
        if self.phi.len() != self.subject_ids.len() {
            return Err(Error::Model("phi rows differ from subject ids".into()));
        }
        for (s, row) in self.phi.iter().enumerate() {
            if row.len() != k || !is_distribution(row) {
                return Err(Error::Model(format!("phi[{s}] is not a distribution")));
            }
        }
        if self.mode == TrainMode::Pooled
            && self.source_schema.total_vocab() != self.schema.total_vocab()
        {
            return Err(Error::Model("pooled vocabulary size mismatch".into()));
        }
        Ok(())
    }

    /// Returns `corpus` expressed in this model's schema: unchanged when
    /// the hashes match, rewritten onto the merged question when this is a
    /// pooled model and `corpus` is bound to the source schema.
    pub fn model_space_corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        if corpus.schema_hash() == self.schema.hash() {
            return Ok(corpus.clone());
        }
        if self.mode == TrainMode::Pooled && corpus.schema_hash() == self.source_schema.hash() {
            let offsets: Vec<usize> = (0..self.source_schema.num_questions())
                .map(|q| self.source_schema.offset(q))
                .collect();
            let subjects = corpus
                .subjects()
                .iter()
                .map(|s| Subject {
                    id: s.id.clone(),
                    observations: s
                        .observations
                        .iter()
                        .map(|o| Observation {
                            question: 0,
                            token: (offsets[o.question as usize] + o.token as usize) as u32,
                            date: o.date,
                        })
                        .collect(),
                    days_tracked: s.days_tracked,
                })
                .collect();
            return Corpus::new(&self.schema, subjects);
        }
        Err(Error::SchemaMismatch {
            expected: self.source_schema.hash().to_string(),
            found: corpus.schema_hash().to_string(),
        })
    }

    pub fn to_checkpoint_string(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            schema_hash: self.schema.hash().to_string(),
            model: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&ck).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::parse("<checkpoint>", e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Model(format!("unsupported checkpoint format '{}'", ck.format)));
        }
        if ck.schema_hash != ck.model.schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: ck.schema_hash,
                found: ck.model.schema.hash().to_string(),
            });
        }
        ck.model.validate()?;
        Ok(ck.model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }
}

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|p| p.is_finite() && *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}
