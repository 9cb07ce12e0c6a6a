//! Interpretability artifacts over a fitted model: salient response sets
//! with word-cloud weights, posterior heatmaps, hard clustering and
//! high-confidence subject selection.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_MASS: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SalientEntry {
    pub token: String,
    pub probability: f64,
    /// Probability over the largest probability of any phenotype and token
    /// for the same question, so font scales are shared within a question.
    pub relative_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalientSet {
    pub question_id: String,
    pub phenotype: usize,
    pub entries: Vec<SalientEntry>,
}

fn question_of(model: &FittedModel, question_id: &str) -> Result<usize> {
    model
        .schema
        .question_index(question_id)
        .ok_or_else(|| Error::Analytics(format!("unknown question '{question_id}'")))
}

/// Minimal highest-probability prefix of `θ̂_{k,q}` whose cumulative mass
/// reaches `mass`. Ties are ordered by vocabulary position.
pub fn salient_responses(model: &FittedModel, question_id: &str, k: usize, mass: f64) -> Result<SalientSet> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Analytics(format!("mass {mass} must lie in (0, 1]")));
    }
    if k >= model.k() {
        return Err(Error::Analytics(format!("phenotype {k} out of range")));
    }
    let q = question_of(model, question_id)?;
    let row = model.theta_row(k, q);
    let global_max = (0..model.k())
        .flat_map(|kk| model.theta_row(kk, q).iter().copied())
        .fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps vocabulary order among equal probabilities
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let vocab = &model.schema.question(q).vocabulary;
    let mut entries = Vec::new();
    let mut cum = 0.0;
    for v in order {
        cum += row[v];
        entries.push(SalientEntry {
            token: vocab[v].clone(),
            probability: row[v],
            relative_weight: row[v] / global_max,
        });
        // slack absorbs rounding in the running sum (0.5 + 0.3 < 0.8 in f64)
        if cum >= mass - 1e-12 {
            break;
        }
    }
    Ok(SalientSet {
        question_id: question_id.to_string(),
        phenotype: k,
        entries,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn hard_assign(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub subject_id: String,
    pub cluster: usize,
    pub max_probability: f64,
    pub phi: Vec<f64>,
}

/// Hard clustering of every subject in the model.
pub fn assignment_table(model: &FittedModel) -> Vec<Assignment> {
    model
        .subject_ids
        .iter()
        .zip(&model.phi)
        .map(|(id, row)| {
            let cluster = hard_assign(row);
            Assignment {
                subject_id: id.clone(),
                cluster,
                max_probability: row[cluster],
                phi: row.clone(),
            }
        })
        .collect()
}

pub fn assignments_to_tsv(table: &[Assignment]) -> String {
    let mut out = String::from("subject_id\tcluster\tmax_probability\tphi\n");
    for a in table {
        let phi: Vec<String> = a.phi.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{}\t{}", a.subject_id, a.cluster, a.max_probability, phi.join(","));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub min_days: u32,
    pub per_cluster: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            threshold: 0.95,
            min_days: 30,
            per_cluster: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSubject {
    pub subject_id: String,
    pub cluster: usize,
    pub max_probability: f64,
    pub days_tracked: u32,
}

/// Subjects whose largest proportion exceeds `threshold` (strictly; at a
/// threshold of 1 only exactly degenerate rows qualify) and who tracked at
/// least `min_days` days, sampled `per_cluster` per phenotype without
/// replacement. Eligible subjects are sorted by id before sampling, so
/// corpus order never affects the result.
pub fn confident_subjects(model: &FittedModel, corpus: &Corpus, cfg: &SelectionConfig) -> Result<Vec<SelectedSubject>> {
    let k = model.k();
    if !(cfg.threshold > 1.0 / k as f64 && cfg.threshold <= 1.0) {
        return Err(Error::Analytics(format!(
            "threshold {} must lie in (1/K, 1] = ({}, 1]",
            cfg.threshold,
            1.0 / k as f64
        )));
    }
    let days: HashMap<&str, Option<u32>> = corpus
        .subjects()
        .iter()
        .map(|s| (s.id.as_str(), s.days_tracked))
        .collect();
    let mut eligible: Vec<Vec<SelectedSubject>> = vec![Vec::new(); k];
    for a in assignment_table(model) {
        let d = days
            .get(a.subject_id.as_str())
            .copied()
            .flatten()
            .ok_or_else(|| {
                Error::Analytics(format!(
                    "days_tracked metadata required (missing for subject '{}')",
                    a.subject_id
                ))
            })?;
        let confident = a.max_probability > cfg.threshold || a.max_probability == 1.0;
        if confident && d >= cfg.min_days {
            eligible[a.cluster].push(SelectedSubject {
                subject_id: a.subject_id,
                cluster: a.cluster,
                max_probability: a.max_probability,
                days_tracked: d,
            });
        }
    }
    let shortfall: Vec<String> = eligible
        .iter()
        .enumerate()
        .filter(|(_, e)| e.len() < cfg.per_cluster)
        .map(|(kk, e)| format!("phenotype {kk}: {} of {}", e.len(), cfg.per_cluster))
        .collect();
    if !shortfall.is_empty() {
        return Err(Error::Analytics(format!(
            "not enough eligible subjects ({})",
            shortfall.join("; ")
        )));
    }
    let mut selected = Vec::with_capacity(k * cfg.per_cluster);
    for (kk, mut pool) in eligible.into_iter().enumerate() {
        pool.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut rng = rng_from_seed(derive_seed(cfg.seed, kk as u64));
        let mut picks = index::sample(&mut rng, pool.len(), cfg.per_cluster).into_vec();
        picks.sort_unstable();
        selected.extend(picks.into_iter().map(|i| pool[i].clone()));
    }
    Ok(selected)
}

pub fn selection_to_tsv(sel: &[SelectedSubject]) -> String {
    let mut out = String::from("subject_id\tcluster\tmax_probability\tdays_tracked\n");
    for s in sel {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.subject_id, s.cluster, s.max_probability, s.days_tracked);
    }
    out
}

/// `K × V_q` matrix of `θ̂` for one question, columns in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub question_id: String,
    pub tokens: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("phenotype");
        for t in &self.tokens {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{k}");
            for p in row {
                let _ = write!(out, "\t{p}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn export_heatmap(model: &FittedModel, question_id: &str) -> Result<Heatmap> {
    let q = question_of(model, question_id)?;
    Ok(Heatmap {
        question_id: question_id.to_string(),
        tokens: model.schema.question(q).vocabulary.clone(),
        rows: (0..model.k()).map(|k| model.theta_row(k, q).to_vec()).collect(),
    })
}

impl SalientSet {
    pub fn to_tsv_rows(&self, out: &mut String) {
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.phenotype, e.token, e.probability, e.relative_weight
            );
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm, O(n³)). Returns `assignment[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    // potentials and matching over 1-based columns; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_match[j] > 0 {
            assignment[col_match[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Matches estimated phenotypes to reference phenotypes by minimising the
/// summed per-question L1 distance between response distributions.
/// Returns `perm[estimated] = reference`.
pub fn match_phenotypes(estimated: &[Vec<Vec<f64>>], reference: &[Vec<Vec<f64>>]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = estimated
        .iter()
        .map(|e| {
            reference
                .iter()
                .map(|r| e.iter().zip(r).map(|(a, b)| crate::simulator::l1(a, b)).sum())
                .collect()
        })
        .collect();
    hungarian(&cost)
}
