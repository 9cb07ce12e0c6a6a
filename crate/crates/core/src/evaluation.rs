//! Held-out likelihood: subject-level fold splits, the left-to-right
//! particle estimator for the per-question model, and an exact
//! enumeration for tiny instances.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::{Corpus, Observation};
use crate::error::{Error, Result};
use crate::inference::{train, Hyperparams};
use crate::math::ln_gamma;
use crate::model::{FittedModel, TrainConfig, TrainMode};
use crate::rng::{derive_seed, rng_from_seed, sample_index};
use crate::schema::QuestionSchema;

pub const DEFAULT_PARTICLES: usize = 50;
/// Largest `K^N` [`exact_ll_small`] will enumerate.
pub const EXACT_LIMIT: u64 = 1 << 22;

/// Assignment of subjects to folds; folds partition the subjects and
/// differ in size by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub n_folds: usize,
    pub seed: u64,
    /// `(subject_id, fold)` in corpus order.
    pub assignment: Vec<(String, usize)>,
}

impl FoldSpec {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignment.iter().find(|(s, _)| s == subject_id).map(|(_, f)| *f)
    }

    /// Corpus indices of the subjects held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, (_, f))| *f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, (_, f))| *f != fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for (_, f) in &self.assignment {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Shuffles subjects with `seed` and deals them round-robin. Splits are
/// always by subject, never by observation.
pub fn split_folds(corpus: &Corpus, n_folds: usize, seed: u64) -> Result<FoldSpec> {
    if n_folds < 2 {
        return Err(Error::Eval("need at least 2 folds".into()));
    }
    if corpus.num_subjects() < n_folds {
        return Err(Error::Eval(format!(
            "{} subjects cannot fill {n_folds} folds",
            corpus.num_subjects()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.num_subjects()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut fold = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % n_folds;
    }
    Ok(FoldSpec {
        n_folds,
        seed,
        assignment: corpus
            .subjects()
            .iter()
            .zip(fold)
            .map(|(s, f)| (s.id.clone(), f))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeftToRight {
    pub particles: usize,
    /// Resample earlier positions before each prediction. Disabling it
    /// gives the cheaper sequential variant, a biased approximation.
    pub resample: bool,
}

impl Default for LeftToRight {
    fn default() -> Self {
        LeftToRight {
            particles: DEFAULT_PARTICLES,
            resample: true,
        }
    }
}

/// `θ̂_{k, q_n, v_n}` for every token, laid out `[n * K + k]`.
fn emissions(model: &FittedModel, obs: &[Observation]) -> Result<Vec<f64>> {
    let k = model.k();
    let mut e = Vec::with_capacity(obs.len() * k);
    for o in obs {
        let q = o.question as usize;
        if q >= model.schema.num_questions() || o.token as usize >= model.schema.vocab_size(q) {
            return Err(Error::Eval(format!(
                "token ({}, {}) is outside the model schema",
                o.question, o.token
            )));
        }
        e.extend((0..k).map(|kk| model.theta[kk][q][o.token as usize]));
    }
    Ok(e)
}

/// Left-to-right estimate of `ln p(x_1..x_N)` for one subject, with the
/// fitted response distributions held fixed and the subject's proportions
/// integrated against the Dirichlet(α) prior.
pub fn left_to_right_ll(model: &FittedModel, obs: &[Observation], particles: usize, seed: u64) -> Result<f64> {
    left_to_right_ll_with(
        model,
        obs,
        LeftToRight {
            particles,
            resample: true,
        },
        seed,
    )
}

pub fn left_to_right_ll_with(
    model: &FittedModel,
    obs: &[Observation],
    opts: LeftToRight,
    seed: u64,
) -> Result<f64> {
    if opts.particles == 0 {
        return Err(Error::Eval("need at least one particle".into()));
    }
    let e = emissions(model, obs)?;
    let n_tok = obs.len();
    if n_tok == 0 {
        return Ok(0.0);
    }
    let k = model.k();
    let alpha = &model.hyperparams.alpha;
    let alpha_sum: f64 = alpha.iter().sum();
    let r_total = opts.particles;
    let mut rng = rng_from_seed(seed);

    let mut z = vec![0u32; r_total * n_tok];
    let mut counts = vec![0u32; r_total * k];
    let mut w = vec![0.0; k];
    let mut ll = 0.0;

    for n in 0..n_tok {
        let emit_n = &e[n * k..(n + 1) * k];
        let mut p_sum = 0.0;
        for r in 0..r_total {
            let zr = &mut z[r * n_tok..(r + 1) * n_tok];
            let cr = &mut counts[r * k..(r + 1) * k];
            if opts.resample {
                for i in 0..n {
                    let old = zr[i] as usize;
                    cr[old] -= 1;
                    let emit_i = &e[i * k..(i + 1) * k];
                    for kk in 0..k {
                        w[kk] = (alpha[kk] + cr[kk] as f64) * emit_i[kk];
                    }
                    let new = if w.iter().any(|x| *x > 0.0) {
                        sample_index(&mut rng, &w)
                    } else {
                        old
                    };
                    zr[i] = new as u32;
                    cr[new] += 1;
                }
            }
            let mut p = 0.0;
            for kk in 0..k {
                w[kk] = (alpha[kk] + cr[kk] as f64) * emit_n[kk];
                p += w[kk];
            }
            p_sum += p / (alpha_sum + n as f64);
            if p > 0.0 {
                let new = sample_index(&mut rng, &w);
                zr[n] = new as u32;
                cr[new] += 1;
            } else {
                // impossible token under every phenotype; the estimate is -inf
                return Ok(f64::NEG_INFINITY);
            }
        }
        ll += (p_sum / r_total as f64).ln();
    }
    Ok(ll)
}

/// Exact `ln p(x_1..x_N)` under fixed `θ̂` and a Dirichlet(α) subject
/// prior, summing all `K^N` assignment vectors in log space.
pub fn exact_ll_small(model: &FittedModel, obs: &[Observation]) -> Result<f64> {
    let k = model.k();
    let n_tok = obs.len();
    let size = (k as u64).checked_pow(n_tok as u32);
    if size.is_none_or(|s| s > EXACT_LIMIT) {
        return Err(Error::Eval(format!(
            "instance too large: {k}^{n_tok} assignments exceeds {EXACT_LIMIT}"
        )));
    }
    let e = emissions(model, obs)?;
    let ln_e: Vec<f64> = e.iter().map(|x| x.ln()).collect();
    let alpha = &model.hyperparams.alpha;
    let alpha_sum: f64 = alpha.iter().sum();
    // ln Γ(α_k + c) − ln Γ(α_k) for c in 0..=N
    let prior_terms: Vec<Vec<f64>> = alpha
        .iter()
        .map(|&a| (0..=n_tok).map(|c| ln_gamma(a + c as f64) - ln_gamma(a)).collect())
        .collect();
    let norm = ln_gamma(alpha_sum) - ln_gamma(alpha_sum + n_tok as f64);

    let mut z = vec![0usize; n_tok];
    let mut counts = vec![0usize; k];
    counts[0] = n_tok;
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0;
    loop {
        let mut term = norm;
        for (kk, &c) in counts.iter().enumerate() {
            term += prior_terms[kk][c];
        }
        for (n, &zn) in z.iter().enumerate() {
            term += ln_e[n * k + zn];
        }
        if term > max {
            acc = if max == f64::NEG_INFINITY { 1.0 } else { acc * (max - term).exp() + 1.0 };
            max = term;
        } else if term > f64::NEG_INFINITY {
            acc += (term - max).exp();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == n_tok {
                return Ok(if max == f64::NEG_INFINITY { max } else { max + acc.ln() });
            }
            counts[z[pos]] -= 1;
            z[pos] += 1;
            if z[pos] == k {
                z[pos] = 0;
                counts[0] += 1;
                pos += 1;
            } else {
                counts[z[pos]] += 1;
                break;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subject_ids: Vec<String>,
    pub tokens: Vec<usize>,
    /// Per-subject log-likelihood (nats).
    pub per_subject: Vec<f64>,
    pub total: f64,
    pub total_tokens: usize,
    /// `total / total_tokens`; 0 when there are no tokens.
    pub per_token: f64,
    pub particles: usize,
    pub resample: bool,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# particles={} resample={} seed={}\nsubject_id\ttokens\tlog_likelihood\n",
            self.particles, self.resample, self.seed
        );
        for ((id, n), ll) in self.subject_ids.iter().zip(&self.tokens).zip(&self.per_subject) {
            let _ = writeln!(out, "{id}\t{n}\t{ll}");
        }
        let _ = writeln!(out, "#total\t{}\t{}", self.total_tokens, self.total);
        let _ = writeln!(out, "#per_token\t{}\t{}", self.total_tokens, self.per_token);
        out
    }
}

/// Left-to-right log-likelihood of every held-out subject. Subject `i`
/// uses seed `derive_seed(seed, i)`, so results do not depend on the
/// thread count.
pub fn evaluate(model: &FittedModel, heldout: &Corpus, opts: LeftToRight, seed: u64) -> Result<EvalReport> {
    let corpus = model.model_space_corpus(heldout)?;
    let per_subject = corpus
        .subjects()
        .par_iter()
        .enumerate()
        .map(|(i, s)| left_to_right_ll_with(model, &s.observations, opts, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<f64>>>()?;
    let tokens: Vec<usize> = corpus.subjects().iter().map(|s| s.len()).collect();
    let total = per_subject.iter().fold(0.0, |acc: f64, v| acc + v);
    let total_tokens: usize = tokens.iter().sum();
    Ok(EvalReport {
        subject_ids: corpus.subjects().iter().map(|s| s.id.clone()).collect(),
        tokens,
        per_subject,
        total,
        total_tokens,
        per_token: if total_tokens == 0 { 0.0 } else { total / total_tokens as f64 },
        particles: opts.particles,
        resample: opts.resample,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct XvalConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub n_folds: usize,
    pub train: TrainConfig,
    pub eval: LeftToRight,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: usize,
    pub test_tokens: usize,
    pub per_question_total: f64,
    pub pooled_total: f64,
}

impl FoldResult {
    pub fn per_question_per_token(&self) -> f64 {
        self.per_question_total / self.test_tokens.max(1) as f64
    }

    pub fn pooled_per_token(&self) -> f64 {
        self.pooled_total / self.test_tokens.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XvalReport {
    pub folds: Vec<FoldResult>,
}

impl XvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "fold\ttest_subjects\ttest_tokens\tper_question_total\tper_question_per_token\tpooled_total\tpooled_per_token\n",
        );
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                f.fold,
                f.test_subjects,
                f.test_tokens,
                f.per_question_total,
                f.per_question_per_token(),
                f.pooled_total,
                f.pooled_per_token()
            );
        }
        out
    }
}

/// Splits subjects into folds, then for each fold trains the per-question
/// model and the pooled baseline on the remaining folds and scores the
/// held-out fold with both. Folds run concurrently; all seeds are derived
/// from `cfg.seed`.
pub fn cross_validate(corpus: &Corpus, schema: &QuestionSchema, cfg: &XvalConfig) -> Result<XvalReport> {
    let folds = split_folds(corpus, cfg.n_folds, cfg.seed)?;
    let hp = Hyperparams::symmetric(cfg.k, cfg.alpha, cfg.beta, schema)?;
    let folds = (0..cfg.n_folds)
        .into_par_iter()
        .map(|f| {
            let fold_seed = derive_seed(cfg.seed, f as u64 + 1);
            let train_corpus = corpus.subset(&folds.train_indices(f));
            let test_corpus = corpus.subset(&folds.test_indices(f));
            let score = |mode: TrainMode| -> Result<f64> {
                let tc = TrainConfig {
                    mode,
                    seed: derive_seed(fold_seed, 1),
                    ..cfg.train
                };
                let model = train(&train_corpus, schema, &hp, &tc)?.model;
                Ok(evaluate(&model, &test_corpus, cfg.eval, derive_seed(fold_seed, 2))?.total)
            };
            Ok(FoldResult {
                fold: f,
                test_subjects: test_corpus.num_subjects(),
                test_tokens: test_corpus.num_observations(),
                per_question_total: score(TrainMode::PerQuestion)?,
                pooled_total: score(TrainMode::Pooled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(XvalReport { folds })
}
