//! Synthetic cohorts drawn from the per-question generative process:
//!
//! 1. `φ_s ~ Dirichlet_K(α)` per subject
//! 2. `θ_{k,q} ~ Dirichlet_{V_q}(β_q)` per phenotype and question
//! 3. `z_{s,n} ~ Categorical(φ_s)`
//! 4. `x_{s,n} | z, q ~ Categorical(θ_{z,q})`
//!
//! The question `q_{s,n}` of each token is exogenous to the model; it is
//! drawn from `question_mix` independently of `z` (uniform by default).

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Observation, Subject};
use crate::error::{Error, Result};
use crate::inference::Hyperparams;
use crate::model::{FittedModel, ModelKind, TrainMode};
use crate::rng::{rng_from_seed, sample_dirichlet, sample_index, SimRng};
use crate::schema::QuestionSchema;

/// Median observations per subject in the reference cohort.
pub const DEFAULT_TOKENS_MEDIAN: f64 = 35.0;
/// Log-scale spread giving a truncated, rounded mean of ~159 with median 35.
pub const DEFAULT_TOKENS_SIGMA: f64 = 1.8327;
pub const DEFAULT_TOKENS_CAP: usize = 6065;
/// Mean observations per tracked day (159 / 71).
pub const DEFAULT_OBSERVATIONS_PER_DAY: f64 = 159.0 / 71.0;

const SEPARATION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Symmetric(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Symmetric(f64),
    /// One concentration vector per question (length `V_q`).
    PerQuestion(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenCount {
    Fixed { n: usize },
    /// `round(exp(N(mu, sigma²)))`, resampled until it lies in `[1, cap]`.
    Lognormal { mu: f64, sigma: f64, cap: usize },
}

impl Default for TokenCount {
    fn default() -> Self {
        TokenCount::Lognormal {
            mu: DEFAULT_TOKENS_MEDIAN.ln(),
            sigma: DEFAULT_TOKENS_SIGMA,
            cap: DEFAULT_TOKENS_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuestionMix {
    /// Stand-in: the model never specifies how questions are chosen.
    #[default]
    Uniform,
    Weights { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateSpec {
    pub start: NaiveDate,
    pub observations_per_day: f64,
    /// Subjects start tracking on a uniformly drawn day in `[0, start_window)`.
    #[serde(default = "default_window")]
    pub start_window: u64,
}

fn default_window() -> u64 {
    455
}

impl Default for DateSpec {
    fn default() -> Self {
        DateSpec {
            start: NaiveDate::from_ymd_opt(2016, 12, 1).unwrap(),
            observations_per_day: DEFAULT_OBSERVATIONS_PER_DAY,
            start_window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeConfig {
    pub k: usize,
    pub schema: QuestionSchema,
    pub subjects: usize,
    pub alpha: AlphaSpec,
    pub beta: BetaSpec,
    pub tokens_per_subject: TokenCount,
    pub question_mix: QuestionMix,
    /// Reject-and-redraw each question's `K` rows until every pair is at
    /// least this far apart in L1.
    pub min_theta_separation: Option<f64>,
    /// Emit dated observations (gives `days_tracked`); `None` for undated.
    pub dates: Option<DateSpec>,
    pub seed: u64,
}

/// On-disk form of [`GenerativeConfig`]; `schema` is `"phendo"` or a path
/// relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfigFile {
    pub k: usize,
    pub schema: String,
    pub subjects: usize,
    pub alpha: AlphaSpec,
    pub beta: BetaSpec,
    #[serde(default)]
    pub tokens_per_subject: TokenCount,
    #[serde(default)]
    pub question_mix: QuestionMix,
    #[serde(default)]
    pub min_theta_separation: Option<f64>,
    #[serde(default = "default_dates")]
    pub dates: Option<DateSpec>,
    pub seed: u64,
}

fn default_dates() -> Option<DateSpec> {
    Some(DateSpec::default())
}

impl GenerativeConfig {
    /// Defaults calibrated to the reference cohort's observation counts.
    pub fn new(k: usize, schema: QuestionSchema, subjects: usize, seed: u64) -> Self {
        GenerativeConfig {
            k,
            schema,
            subjects,
            alpha: AlphaSpec::Symmetric(0.001),
            beta: BetaSpec::Symmetric(0.001),
            tokens_per_subject: TokenCount::default(),
            question_mix: QuestionMix::Uniform,
            min_theta_separation: None,
            dates: Some(DateSpec::default()),
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GenerativeConfigFile = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_file(file, base)
    }

    pub fn from_file(file: GenerativeConfigFile, base_dir: &Path) -> Result<Self> {
        let schema = if file.schema == crate::schema::BUILTIN_PHENDO {
            QuestionSchema::phendo()
        } else {
            QuestionSchema::load(base_dir.join(&file.schema))?
        };
        let cfg = GenerativeConfig {
            k: file.k,
            schema,
            subjects: file.subjects,
            alpha: file.alpha,
            beta: file.beta,
            tokens_per_subject: file.tokens_per_subject,
            question_mix: file.question_mix,
            min_theta_separation: file.min_theta_separation,
            dates: file.dates,
            seed: file.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generating hyperparameters as model hyperparameters.
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let alpha = match &self.alpha {
            AlphaSpec::Symmetric(a) => vec![*a; self.k],
            AlphaSpec::Vector(v) => v.clone(),
        };
        let beta = match &self.beta {
            BetaSpec::Symmetric(b) => self.schema.vocab_sizes().into_iter().map(|v| vec![*b; v]).collect(),
            BetaSpec::PerQuestion(v) => v.clone(),
        };
        let hp = Hyperparams { alpha, beta };
        if hp.k() != self.k {
            return Err(Error::Config(format!("alpha has {} entries for K = {}", hp.k(), self.k)));
        }
        hp.validate(&self.schema)?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.subjects < 1 {
            return Err(Error::Config("subject count must be at least 1".into()));
        }
        self.hyperparams()?;
        match self.tokens_per_subject {
            TokenCount::Fixed { n } if n < 1 => {
                return Err(Error::Config("fixed tokens_per_subject must be >= 1".into()))
            }
            TokenCount::Lognormal { mu, sigma, cap }
                if !mu.is_finite() || !(sigma.is_finite() && sigma >= 0.0) || cap < 1 =>
            {
                return Err(Error::Config("invalid lognormal token count".into()))
            }
            _ => {}
        }
        if let QuestionMix::Weights { weights } = &self.question_mix {
            if weights.len() != self.schema.num_questions()
                || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || weights.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config("question_mix weights must be nonnegative, one per question".into()));
            }
        }
        if let Some(sep) = self.min_theta_separation {
            if !(0.0..=2.0).contains(&sep) {
                return Err(Error::Config("min_theta_separation must lie in [0, 2]".into()));
            }
        }
        if let Some(d) = &self.dates {
            if !(d.observations_per_day.is_finite() && d.observations_per_day > 0.0) || d.start_window == 0 {
                return Err(Error::Config("invalid date spec".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `theta_star[k][q][v]`
    pub theta_star: Vec<Vec<Vec<f64>>>,
    /// `phi_star[s][k]`
    pub phi_star: Vec<Vec<f64>>,
    /// `z_star[s][n]`, aligned with the corpus observations.
    pub z_star: Vec<Vec<u32>>,
}

impl GroundTruth {
    /// Packs the truth into the checkpoint format so the comparison
    /// tooling for fitted models applies unchanged.
    pub fn to_model(&self, cfg: &GenerativeConfig, corpus: &Corpus) -> Result<FittedModel> {
        let model = FittedModel {
            kind: ModelKind::GroundTruth,
            mode: TrainMode::PerQuestion,
            schema: cfg.schema.clone(),
            source_schema: cfg.schema.clone(),
            hyperparams: cfg.hyperparams()?,
            theta: self.theta_star.clone(),
            phi: self.phi_star.clone(),
            subject_ids: corpus.subjects().iter().map(|s| s.id.clone()).collect(),
            training: None,
            assignments: Some(self.z_star.clone()),
        };
        Ok(model)
    }

    /// Index of the largest true proportion for each subject (lowest index
    /// on ties).
    pub fn dominant_phenotypes(&self) -> Vec<usize> {
        self.phi_star.iter().map(|row| crate::analytics::hard_assign(row)).collect()
    }
}

/// Draws a cohort and its ground truth; deterministic in `cfg.seed`.
pub fn sample_cohort(cfg: &GenerativeConfig) -> Result<(Corpus, GroundTruth)> {
    cfg.validate()?;
    let hp = cfg.hyperparams()?;
    let schema = &cfg.schema;
    let mut rng = rng_from_seed(cfg.seed);

    let theta_star = sample_theta(&mut rng, cfg.k, &hp.beta, cfg.min_theta_separation)?;

    let mix: Vec<f64> = match &cfg.question_mix {
        QuestionMix::Uniform => vec![1.0; schema.num_questions()],
        QuestionMix::Weights { weights } => weights.clone(),
    };
    let width = (cfg.subjects.max(1) - 1).to_string().len().max(4);

    let mut subjects = Vec::with_capacity(cfg.subjects);
    let mut phi_star = Vec::with_capacity(cfg.subjects);
    let mut z_star = Vec::with_capacity(cfg.subjects);
    for s in 0..cfg.subjects {
        let phi = sample_dirichlet(&mut rng, &hp.alpha);
        let n = draw_token_count(&mut rng, &cfg.tokens_per_subject);
        let mut obs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let q = sample_index(&mut rng, &mix);
            let z = sample_index(&mut rng, &phi);
            let v = sample_index(&mut rng, &theta_star[z][q]);
            obs.push(Observation::new(q, v));
            zs.push(z as u32);
        }
        if let Some(d) = &cfg.dates {
            assign_dates(&mut rng, d, &mut obs);
        }
        subjects.push(Subject::new(format!("S{s:0width$}"), obs));
        phi_star.push(phi);
        z_star.push(zs);
    }
    let corpus = Corpus::new(schema, subjects)?;
    Ok((
        corpus,
        GroundTruth {
            theta_star,
            phi_star,
            z_star,
        },
    ))
}

fn sample_theta(
    rng: &mut SimRng,
    k: usize,
    beta: &[Vec<f64>],
    min_sep: Option<f64>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut theta = vec![Vec::with_capacity(beta.len()); k];
    for (q, b) in beta.iter().enumerate() {
        let mut attempt = 0;
        let rows = loop {
            let rows: Vec<Vec<f64>> = (0..k).map(|_| sample_dirichlet(rng, b)).collect();
            let ok = match min_sep {
                None => true,
                Some(sep) => (0..k).all(|i| (i + 1..k).all(|j| l1(&rows[i], &rows[j]) >= sep)),
            };
            if ok {
                break rows;
            }
            attempt += 1;
            if attempt >= SEPARATION_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not draw {k} rows for question {q} with L1 separation >= {}",
                    min_sep.unwrap_or_default()
                )));
            }
        };
        for (kk, row) in rows.into_iter().enumerate() {
            theta[kk].push(row);
        }
    }
    Ok(theta)
}

pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn draw_token_count(rng: &mut SimRng, spec: &TokenCount) -> usize {
    match *spec {
        TokenCount::Fixed { n } => n,
        TokenCount::Lognormal { mu, sigma, cap } => {
            let dist = LogNormal::new(mu, sigma).expect("validated lognormal");
            loop {
                let x: f64 = dist.sample(rng);
                let n = x.round();
                if n >= 1.0 && n <= cap as f64 {
                    return n as usize;
                }
            }
        }
    }
}

/// Spreads a subject's observations over consecutive tracked days.
fn assign_dates(rng: &mut SimRng, spec: &DateSpec, obs: &mut [Observation]) {
    let n = obs.len();
    if n == 0 {
        return;
    }
    let days = ((n as f64 / spec.observations_per_day).round() as usize).clamp(1, n);
    let first = spec.start + Days::new(rng.random_range(0..spec.start_window));
    for (i, o) in obs.iter_mut().enumerate() {
        let day = (i * days / n) as u64;
        o.date = Some(first + Days::new(day));
    }
}
