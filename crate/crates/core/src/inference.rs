//! Collapsed Gibbs sampling for the per-question mixed-membership model.
//!
//! Subject proportions and per-(phenotype, question) response
//! distributions are integrated out; the chain state is the assignment
//! vector `z` plus the count tables it induces:
//!
//! * `n_sk[s, k]`  observations of subject `s` assigned to phenotype `k`
//! * `n_kv[k, q, v]` responses `v` to question `q` assigned to `k`
//! * `n_kq[k, q]`  row totals of `n_kv`
//!
//! The pooled baseline is the same sampler run on a corpus rewritten onto a
//! single merged question.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::math::ln_gamma;
use crate::model::{FittedModel, ModelKind, TrainConfig, TrainMode};
use crate::rng::{rng_from_seed, sample_index, SimRng};
use crate::schema::QuestionSchema;

/// Dirichlet hyperparameters: `alpha` over phenotypes (length K) and
/// `beta[q][v]` over each question's vocabulary, shared by all phenotypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

impl Hyperparams {
    pub fn symmetric(k: usize, alpha: f64, beta: f64, schema: &QuestionSchema) -> Result<Self> {
        let hp = Hyperparams {
            alpha: vec![alpha; k],
            beta: schema.vocab_sizes().into_iter().map(|v| vec![beta; v]).collect(),
        };
        hp.validate(schema)?;
        Ok(hp)
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, schema: &QuestionSchema) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let positive = |x: &f64| x.is_finite() && *x > 0.0;
        if !self.alpha.iter().all(positive) {
            return Err(Error::Config("alpha entries must be positive and finite".into()));
        }
        if self.beta.len() != schema.num_questions()
            || self
                .beta
                .iter()
                .zip(schema.vocab_sizes())
                .any(|(b, v)| b.len() != v)
        {
            return Err(Error::Config("beta shape does not match the schema".into()));
        }
        if !self.beta.iter().flatten().all(positive) {
            return Err(Error::Config("beta entries must be positive and finite".into()));
        }
        Ok(())
    }

    /// Hyperparameters for the pooled rewrite of the same schema.
    pub fn pooled(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha.clone(),
            beta: vec![self.beta.iter().flatten().copied().collect()],
        }
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// Chain state of the collapsed sampler. Tokens are stored flattened in
/// corpus order; `subject_start[s]..subject_start[s + 1]` are subject `s`.
#[derive(Debug, Clone)]
pub struct ModelState {
    schema_hash: String,
    k: usize,
    num_questions: usize,
    offsets: Vec<usize>,
    subject_start: Vec<usize>,
    token_question: Vec<u32>,
    /// `offset(q) + v`
    token_flat: Vec<u32>,
    z: Vec<u32>,
    n_sk: Vec<u32>,
    n_kv: Vec<u32>,
    n_kq: Vec<u32>,
    alpha: Vec<f64>,
    beta_flat: Vec<f64>,
    beta_sum: Vec<f64>,
    hyperparams: Hyperparams,
    rng: SimRng,
    weights: Vec<f64>,
}

impl ModelState {
    /// Uniform random initial assignments, deterministic in `seed`.
    pub fn init(corpus: &Corpus, schema: &QuestionSchema, hp: &Hyperparams, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let k = hp.k();
        let n = corpus.num_observations();
        let z = (0..n)
            .map(|_| {
                use rand::Rng;
                rng.random_range(0..k as u32)
            })
            .collect();
        Self::build(corpus, schema, hp, z, rng)
    }

    /// State with caller-supplied assignments (flattened in corpus order).
    pub fn with_assignments(
        corpus: &Corpus,
        schema: &QuestionSchema,
        hp: &Hyperparams,
        z: Vec<u32>,
        seed: u64,
    ) -> Result<Self> {
        if z.len() != corpus.num_observations() {
            return Err(Error::Model(format!(
                "{} assignments for {} observations",
                z.len(),
                corpus.num_observations()
            )));
        }
        if z.iter().any(|&zi| zi as usize >= hp.k()) {
            return Err(Error::Model("assignment outside [0, K)".into()));
        }
        Self::build(corpus, schema, hp, z, rng_from_seed(seed))
    }

    fn build(
        corpus: &Corpus,
        schema: &QuestionSchema,
        hp: &Hyperparams,
        z: Vec<u32>,
        rng: SimRng,
    ) -> Result<Self> {
        corpus.ensure_schema(schema)?;
        hp.validate(schema)?;
        let k = hp.k();
        let nq = schema.num_questions();
        let vtot = schema.total_vocab();
        let offsets: Vec<usize> = (0..nq).map(|q| schema.offset(q)).collect();

        let mut subject_start = Vec::with_capacity(corpus.num_subjects() + 1);
        let mut token_question = Vec::with_capacity(z.len());
        let mut token_flat = Vec::with_capacity(z.len());
        subject_start.push(0);
        for s in corpus.subjects() {
            for o in &s.observations {
                debug_assert!((o.token as usize) < schema.vocab_size(o.question as usize));
                token_question.push(o.question);
                token_flat.push((offsets[o.question as usize] + o.token as usize) as u32);
            }
            subject_start.push(token_flat.len());
        }

        let beta_flat: Vec<f64> = hp.beta.iter().flatten().copied().collect();
        let beta_sum = hp.beta.iter().map(|b| b.iter().sum()).collect();
        let mut state = ModelState {
            schema_hash: schema.hash().to_string(),
            k,
            num_questions: nq,
            offsets,
            subject_start,
            token_question,
            token_flat,
            z,
            n_sk: vec![0; corpus.num_subjects() * k],
            n_kv: vec![0; k * vtot],
            n_kq: vec![0; k * nq],
            alpha: hp.alpha.clone(),
            beta_flat,
            beta_sum,
            hyperparams: hp.clone(),
            rng,
            weights: vec![0.0; k],
        };
        state.recount();
        Ok(state)
    }

    fn vocab_total(&self) -> usize {
        self.beta_flat.len()
    }

    fn recount(&mut self) {
        self.n_sk.iter_mut().for_each(|c| *c = 0);
        self.n_kv.iter_mut().for_each(|c| *c = 0);
        self.n_kq.iter_mut().for_each(|c| *c = 0);
        let (k, vtot, nq) = (self.k, self.vocab_total(), self.num_questions);
        for s in 0..self.num_subjects() {
            for i in self.subject_start[s]..self.subject_start[s + 1] {
                let zi = self.z[i] as usize;
                self.n_sk[s * k + zi] += 1;
                self.n_kv[zi * vtot + self.token_flat[i] as usize] += 1;
                self.n_kq[zi * nq + self.token_question[i] as usize] += 1;
            }
        }
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_start.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.z.len()
    }

    pub fn subject_len(&self, s: usize) -> usize {
        self.subject_start[s + 1] - self.subject_start[s]
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    /// Assignments flattened in corpus order.
    pub fn assignments(&self) -> &[u32] {
        &self.z
    }

    pub fn assignment(&self, s: usize, n: usize) -> usize {
        self.z[self.subject_start[s] + n] as usize
    }

    pub fn n_sk(&self, s: usize, k: usize) -> u32 {
        self.n_sk[s * self.k + k]
    }

    pub fn n_kqv(&self, k: usize, q: usize, v: usize) -> u32 {
        self.n_kv[k * self.vocab_total() + self.offsets[q] + v]
    }

    pub fn n_kq(&self, k: usize, q: usize) -> u32 {
        self.n_kq[k * self.num_questions + q]
    }

    /// Recomputes all count tables from `z` and compares them with the
    /// incrementally maintained ones.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut fresh = self.clone();
        fresh.recount();
        if fresh.n_sk != self.n_sk || fresh.n_kv != self.n_kv || fresh.n_kq != self.n_kq {
            return Err("count tables drifted from assignments".into());
        }
        for s in 0..self.num_subjects() {
            let row: u32 = (0..self.k).map(|k| self.n_sk(s, k)).sum();
            if row as usize != self.subject_len(s) {
                return Err(format!("subject {s}: Σ_k N_sk = {row} != N_s"));
            }
        }
        let vtot = self.vocab_total();
        for k in 0..self.k {
            for q in 0..self.num_questions {
                let end = self.offsets.get(q + 1).copied().unwrap_or(vtot);
                let sum: u32 = self.n_kv[k * vtot + self.offsets[q]..k * vtot + end].iter().sum();
                if sum != self.n_kq(k, q) {
                    return Err(format!("block ({k}, {q}): Σ_v N_kqv = {sum} != N_kq"));
                }
            }
        }
        let total_sk: u64 = self.n_sk.iter().map(|&c| c as u64).sum();
        let total_kq: u64 = self.n_kq.iter().map(|&c| c as u64).sum();
        if total_sk != self.z.len() as u64 || total_kq != self.z.len() as u64 {
            return Err("grand totals disagree with token count".into());
        }
        Ok(())
    }

    /// Unnormalised conditional weights for token `i` of subject `s`,
    /// with the token's own assignment already removed from the counts
    /// when `exclude` is `Some(z_i)`.
    #[inline]
    fn fill_weights(&self, s: usize, i: usize, exclude: Option<usize>, out: &mut [f64]) {
        let q = self.token_question[i] as usize;
        let flat = self.token_flat[i] as usize;
        let (k_total, vtot, nq) = (self.k, self.vocab_total(), self.num_questions);
        let beta = self.beta_flat[flat];
        let beta_sum = self.beta_sum[q];
        for (k, w) in out.iter_mut().enumerate().take(k_total) {
            let own = u32::from(exclude == Some(k));
            let nsk = (self.n_sk[s * k_total + k] - own) as f64;
            let nkv = (self.n_kv[k * vtot + flat] - own) as f64;
            let nkq = (self.n_kq[k * nq + q] - own) as f64;
            *w = (self.alpha[k] + nsk) * (beta + nkv) / (beta_sum + nkq);
        }
    }

    /// Normalised full conditional `p(z_{s,n} = k | z_{-sn}, x)`.
    pub fn gibbs_conditional(&self, s: usize, n: usize) -> Vec<f64> {
        assert!(n < self.subject_len(s), "observation ({s}, {n}) out of range");
        let i = self.subject_start[s] + n;
        let mut w = vec![0.0; self.k];
        self.fill_weights(s, i, Some(self.z[i] as usize), &mut w);
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    /// One sequential scan in corpus order. Returns the collapsed joint
    /// log-probability of the resulting state.
    pub fn sweep(&mut self) -> f64 {
        let (k_total, vtot, nq) = (self.k, self.vocab_total(), self.num_questions);
        if k_total > 1 {
            let mut weights = std::mem::take(&mut self.weights);
            for s in 0..self.num_subjects() {
                for i in self.subject_start[s]..self.subject_start[s + 1] {
                    let old = self.z[i] as usize;
                    let q = self.token_question[i] as usize;
                    let flat = self.token_flat[i] as usize;
                    self.n_sk[s * k_total + old] -= 1;
                    self.n_kv[old * vtot + flat] -= 1;
                    self.n_kq[old * nq + q] -= 1;

                    self.fill_weights(s, i, None, &mut weights);
                    let new = sample_index(&mut self.rng, &weights);

                    self.z[i] = new as u32;
                    self.n_sk[s * k_total + new] += 1;
                    self.n_kv[new * vtot + flat] += 1;
                    self.n_kq[new * nq + q] += 1;
                }
            }
            self.weights = weights;
        }
        debug_assert_eq!(self.check_invariants(), Ok(()));
        self.joint_log_likelihood()
    }

    /// Exact collapsed `ln p(X, Z | α, β)` in nats:
    /// `Σ_s [ln B(α + N_s·) − ln B(α)] + Σ_{k,q} [ln B(β_q + N_kq·) − ln B(β_q)]`.
    pub fn joint_log_likelihood(&self) -> f64 {
        let k_total = self.k;
        let alpha_sum: f64 = self.alpha.iter().sum();
        let mut ll = 0.0;
        for s in 0..self.num_subjects() {
            let n_s = self.subject_len(s);
            if n_s == 0 {
                continue;
            }
            let mut acc = 0.0;
            for k in 0..k_total {
                let c = self.n_sk[s * k_total + k];
                if c > 0 {
                    acc += ln_gamma(self.alpha[k] + c as f64) - ln_gamma(self.alpha[k]);
                }
            }
            ll += acc - (ln_gamma(alpha_sum + n_s as f64) - ln_gamma(alpha_sum));
        }
        let vtot = self.vocab_total();
        for k in 0..k_total {
            for q in 0..self.num_questions {
                let total = self.n_kq(k, q);
                if total == 0 {
                    continue;
                }
                let start = self.offsets[q];
                let end = self.offsets.get(q + 1).copied().unwrap_or(vtot);
                let mut acc = 0.0;
                for flat in start..end {
                    let c = self.n_kv[k * vtot + flat];
                    if c > 0 {
                        let b = self.beta_flat[flat];
                        acc += ln_gamma(b + c as f64) - ln_gamma(b);
                    }
                }
                let bs = self.beta_sum[q];
                ll += acc - (ln_gamma(bs + total as f64) - ln_gamma(bs));
            }
        }
        ll
    }

    /// Posterior-mean response distribution `θ̃[k][q][v]` under the current
    /// counts.
    pub fn theta_estimate(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.k)
            .map(|k| {
                (0..self.num_questions)
                    .map(|q| {
                        let denom = self.beta_sum[q] + self.n_kq(k, q) as f64;
                        self.hyperparams.beta[q]
                            .iter()
                            .enumerate()
                            .map(|(v, b)| (b + self.n_kqv(k, q, v) as f64) / denom)
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Posterior-mean phenotype proportions `φ̃[s][k]`.
    pub fn phi_estimate(&self) -> Vec<Vec<f64>> {
        let alpha_sum: f64 = self.alpha.iter().sum();
        (0..self.num_subjects())
            .map(|s| {
                let denom = alpha_sum + self.subject_len(s) as f64;
                (0..self.k)
                    .map(|k| (self.alpha[k] + self.n_sk(s, k) as f64) / denom)
                    .collect()
            })
            .collect()
    }
}

/// Fitted model plus the per-sweep joint log-probability trace.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: FittedModel,
    pub trace: Vec<f64>,
}

/// Runs the sampler and averages posterior-mean estimators over the
/// thinned post-burn-in sweeps of a single chain. Sweep `i` (1-based) is
/// kept when `i > burn_in` and `(iters - i) % thin == 0`, so the final
/// sweep is always included.
pub fn train(
    corpus: &Corpus,
    schema: &QuestionSchema,
    hp: &Hyperparams,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if corpus.num_observations() == 0 {
        return Err(Error::Model("cannot train on an empty corpus".into()));
    }
    hp.validate(schema)?;
    corpus.ensure_schema(schema)?;

    let pooled;
    let (schema_used, corpus_used, hp_used) = match config.mode {
        TrainMode::PerQuestion => (schema, corpus, hp.clone()),
        TrainMode::Pooled => {
            pooled = corpus.pooled(schema)?;
            (&pooled.0, &pooled.1, hp.pooled())
        }
    };

    let mut state = ModelState::init(corpus_used, schema_used, &hp_used, config.seed)?;
    let mut trace = Vec::with_capacity(config.iters);
    let mut theta_acc: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut phi_acc: Option<Vec<Vec<f64>>> = None;
    let mut samples = 0usize;
    for i in 1..=config.iters {
        trace.push(state.sweep());
        if i > config.burn_in && (config.iters - i).is_multiple_of(config.thin) {
            accumulate3(&mut theta_acc, state.theta_estimate());
            accumulate2(&mut phi_acc, state.phi_estimate());
            samples += 1;
        }
    }
    let scale = samples as f64;
    let mut theta = theta_acc.expect("at least one retained sample");
    theta.iter_mut().flatten().flatten().for_each(|x| *x /= scale);
    let mut phi = phi_acc.expect("at least one retained sample");
    phi.iter_mut().flatten().for_each(|x| *x /= scale);

    let model = FittedModel {
        kind: ModelKind::Fitted,
        mode: config.mode,
        schema: schema_used.clone(),
        source_schema: schema.clone(),
        hyperparams: hp_used,
        theta,
        phi,
        subject_ids: corpus.subjects().iter().map(|s| s.id.clone()).collect(),
        training: Some(*config),
        assignments: None,
    };
    Ok(TrainOutput { model, trace })
}

fn accumulate3(acc: &mut Option<Vec<Vec<Vec<f64>>>>, x: Vec<Vec<Vec<f64>>>) {
    match acc {
        None => *acc = Some(x),
        Some(a) => a
            .iter_mut()
            .flatten()
            .flatten()
            .zip(x.iter().flatten().flatten())
            .for_each(|(a, b)| *a += b),
    }
}

fn accumulate2(acc: &mut Option<Vec<Vec<f64>>>, x: Vec<Vec<f64>>) {
    match acc {
        None => *acc = Some(x),
        Some(a) => a
            .iter_mut()
            .flatten()
            .zip(x.iter().flatten())
            .for_each(|(a, b)| *a += b),
    }
}
