//! Statistical validation battery: 2×2 contingency tables with Fisher's
//! exact test, Welch's unequal-variance t-test, confusion matrices and
//! cluster purity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::analytics::Assignment;
use crate::error::{Error, Result};
use crate::math::{ln_factorial, student_t_two_sided};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Tables within this relative distance of the observed point probability
/// count as "as extreme" in the two-sided Fisher sum.
pub const FISHER_RELATIVE_SLACK: f64 = 1e-7;

/// `a` = yes ∧ in-cluster, `b` = yes ∧ not-in-cluster,
/// `c` = no ∧ in-cluster, `d` = no ∧ not-in-cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable2x2 { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn transposed(&self) -> Self {
        ContingencyTable2x2::new(self.a, self.c, self.b, self.d)
    }

    pub fn rows_swapped(&self) -> Self {
        ContingencyTable2x2::new(self.c, self.d, self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Fisher,
    Welch,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::Fisher => "fisher",
            TestKind::Welch => "welch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub kind: TestKind,
    /// Odds ratio (Fisher) or t (Welch).
    pub statistic: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: Option<f64>,
    pub p_value: f64,
    pub significant: bool,
    /// The odds ratio carries the Haldane–Anscombe +0.5 correction.
    pub corrected: bool,
}

impl TestResult {
    fn new(kind: TestKind, statistic: f64, dof: Option<f64>, p_value: f64, corrected: bool) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        TestResult {
            kind,
            statistic,
            dof,
            p_value,
            significant: p_value < SIGNIFICANCE_LEVEL,
            corrected,
        }
    }
}

/// Tallies cluster `k` membership against yes/no answers. Subjects
/// without an answer are left out.
pub fn contingency(assignments: &[Assignment], answers: &HashMap<String, bool>, k: usize) -> Result<ContingencyTable2x2> {
    let mut t = ContingencyTable2x2::new(0, 0, 0, 0);
    for a in assignments {
        let Some(&yes) = answers.get(&a.subject_id) else {
            continue;
        };
        match (yes, a.cluster == k) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    if t.total() == 0 {
        return Err(Error::Validation("no overlapping subjects".into()));
    }
    Ok(t)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Fisher's exact test. The odds ratio is `ad / bc`, or the
/// Haldane–Anscombe corrected ratio when any cell is zero. The two-sided
/// p-value sums the hypergeometric probabilities (margins fixed) of every
/// table no more probable than the observed one.
pub fn fisher_exact(t: &ContingencyTable2x2) -> Result<TestResult> {
    let n = t.total();
    if n == 0 {
        return Err(Error::Validation("empty contingency table".into()));
    }
    let (corrected, odds_ratio) = if t.a == 0 || t.b == 0 || t.c == 0 || t.d == 0 {
        let h = |x: u64| x as f64 + 0.5;
        (true, (h(t.a) * h(t.d)) / (h(t.b) * h(t.c)))
    } else {
        (false, (t.a as f64 * t.d as f64) / (t.b as f64 * t.c as f64))
    };

    let row1 = t.a + t.b;
    let row2 = t.c + t.d;
    let col1 = t.a + t.c;
    let denom = ln_choose(n, col1);
    let ln_p = |a: u64| ln_choose(row1, a) + ln_choose(row2, col1 - a) - denom;
    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let observed = ln_p(t.a);
    let cutoff = observed + FISHER_RELATIVE_SLACK.ln_1p();
    let p: f64 = (lo..=hi)
        .map(ln_p)
        .filter(|&lp| lp <= cutoff)
        .map(f64::exp)
        .sum();
    Ok(TestResult::new(TestKind::Fisher, odds_ratio, None, p.min(1.0), corrected))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom and a two-sided p-value.
pub fn welch_t(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Validation(format!(
            "Welch's t-test needs at least 2 values per group (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite sample value".into()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let sx = vx / x.len() as f64;
    let sy = vy / y.len() as f64;
    let se2 = sx + sy;
    if se2 == 0.0 {
        return Err(Error::Validation("both samples have zero variance".into()));
    }
    let t = (mx - my) / se2.sqrt();
    let dof = se2 * se2 / (sx * sx / (x.len() as f64 - 1.0) + sy * sy / (y.len() as f64 - 1.0));
    let p = student_t_two_sided(t, dof);
    Ok(TestResult::new(TestKind::Welch, t, Some(dof), p, false))
}

/// Rows are model clusters, columns reference labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Matrix with numeric labels `0..rows` and `0..cols`.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged confusion matrix".into()));
        }
        Ok(ConfusionMatrix {
            row_labels: (0..counts.len()).map(|i| i.to_string()).collect(),
            col_labels: (0..cols).map(|i| i.to_string()).collect(),
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\\reference");
        for c in &self.col_labels {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.counts) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `Σ_rows max(row) / total`.
pub fn purity(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Validation("empty confusion matrix".into()));
    }
    let hits: u64 = m.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / total as f64)
}

/// Label coarsening applied to both label maps before tallying.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coarsening {
    /// Label `"0"` becomes `"severe"`, every other label `"non-severe"`.
    SevereZero,
    /// Explicit label → coarse label map; the order of first appearance of
    /// coarse labels fixes the row/column order.
    Map(Vec<(String, String)>),
}

pub const SEVERE_ZERO_NAME: &str = "severe";

impl Coarsening {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (from, to) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("coarsening line {}: expected 'label<TAB>group'", i + 1)))?;
            pairs.push((from.trim().to_string(), to.trim().to_string()));
        }
        Ok(Coarsening::Map(pairs))
    }

    /// `"severe"` selects the built-in map; anything else is a file path.
    pub fn load(source: &str) -> Result<Self> {
        if source == SEVERE_ZERO_NAME {
            return Ok(Coarsening::SevereZero);
        }
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        Self::parse(&text)
    }

    fn apply(&self, label: &str) -> Result<String> {
        match self {
            Coarsening::SevereZero => Ok(if label == "0" { "severe" } else { "non-severe" }.to_string()),
            Coarsening::Map(pairs) => pairs
                .iter()
                .find(|(from, _)| from == label)
                .map(|(_, to)| to.clone())
                .ok_or_else(|| Error::Validation(format!("label '{label}' missing from coarsening map"))),
        }
    }

    fn order(&self) -> Vec<String> {
        match self {
            Coarsening::SevereZero => vec!["severe".into(), "non-severe".into()],
            Coarsening::Map(pairs) => {
                let mut seen = Vec::new();
                for (_, to) in pairs {
                    if !seen.contains(to) {
                        seen.push(to.clone());
                    }
                }
                seen
            }
        }
    }
}

/// Numeric labels sort numerically, others lexicographically after them.
fn natural_order(labels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    v.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    });
    v
}

/// Co-occurrence counts over subjects present in both label maps.
pub fn confusion(
    model_labels: &BTreeMap<String, String>,
    ref_labels: &BTreeMap<String, String>,
    coarsen: Option<&Coarsening>,
) -> Result<ConfusionMatrix> {
    let map = |l: &str| -> Result<String> {
        match coarsen {
            Some(c) => c.apply(l),
            None => Ok(l.to_string()),
        }
    };
    let mut pairs = Vec::new();
    for (subject, m) in model_labels {
        if let Some(r) = ref_labels.get(subject) {
            pairs.push((map(m)?, map(r)?));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Validation("label maps share no subjects".into()));
    }
    let order = |labels: BTreeSet<String>| -> Vec<String> {
        match coarsen {
            Some(c) => c.order().into_iter().filter(|l| labels.contains(l)).collect(),
            None => natural_order(labels),
        }
    };
    let rows = order(pairs.iter().map(|p| p.0.clone()).collect());
    let cols = order(pairs.iter().map(|p| p.1.clone()).collect());
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    for (m, r) in &pairs {
        let i = rows.iter().position(|x| x == m).expect("row label present");
        let j = cols.iter().position(|x| x == r).expect("column label present");
        counts[i][j] += 1;
    }
    Ok(ConfusionMatrix {
        row_labels: rows,
        col_labels: cols,
        counts,
    })
}

/// Reads `subject_id<TAB>label[<TAB>...]`; a leading `subject_id` header
/// line is skipped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("subject_id")) {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(s), Some(l)) = (fields.next(), fields.next()) else {
            return Err(Error::parse(path, format!("line {}: expected 'subject_id<TAB>label'", i + 1)));
        };
        if out.insert(s.trim().to_string(), l.trim().to_string()).is_some() {
            return Err(Error::parse(path, format!("line {}: duplicate subject '{}'", i + 1, s.trim())));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerColumn {
    Binary(HashMap<String, bool>),
    Continuous(HashMap<String, f64>),
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Parses `subject_id<TAB>question<TAB>value` rows into one column per
/// question. A question whose values are all yes/no/true/false is binary;
/// all-numeric is continuous; anything else is an error.
pub fn parse_answers(text: &str) -> Result<BTreeMap<String, AnswerColumn>> {
    let mut raw: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("subject_id")) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Validation(format!("answers line {}: expected 3 tab-separated fields", i + 1)));
        }
        raw.entry(f[1].trim().to_string())
            .or_default()
            .push((f[0].trim().to_string(), f[2].trim().to_string(), i + 1));
    }
    let mut out = BTreeMap::new();
    for (question, rows) in raw {
        let col = if rows.iter().all(|(_, v, _)| parse_bool(v).is_some()) {
            AnswerColumn::Binary(rows.iter().map(|(s, v, _)| (s.clone(), parse_bool(v).unwrap())).collect())
        } else {
            let mut m = HashMap::new();
            for (s, v, line) in &rows {
                let x: f64 = v.parse().map_err(|_| {
                    Error::Validation(format!(
                        "answers line {line}: '{v}' for question '{question}' is neither yes/no nor a number"
                    ))
                })?;
                m.insert(s.clone(), x);
            }
            AnswerColumn::Continuous(m)
        };
        out.insert(question, col);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationRow {
    pub cluster: usize,
    pub question: String,
    pub kind: TestKind,
    /// Subjects with both an assignment and an answer.
    pub n: usize,
    pub result: Option<TestResult>,
    pub note: String,
}

/// Every (cluster, question) test: Fisher on binary questions, Welch
/// (in-cluster vs the rest) on continuous ones. Tests that cannot be
/// computed are reported with a note instead of aborting the battery.
pub fn associate(assignments: &[Assignment], answers: &BTreeMap<String, AnswerColumn>, k: usize) -> Vec<AssociationRow> {
    let mut rows = Vec::new();
    for cluster in 0..k {
        for (question, col) in answers {
            let (kind, n, outcome) = match col {
                AnswerColumn::Binary(map) => {
                    let n = assignments.iter().filter(|a| map.contains_key(&a.subject_id)).count();
                    let r = contingency(assignments, map, cluster).and_then(|t| {
                        let r = fisher_exact(&t)?;
                        Ok((r, format!("a={} b={} c={} d={}", t.a, t.b, t.c, t.d)))
                    });
                    (TestKind::Fisher, n, r)
                }
                AnswerColumn::Continuous(map) => {
                    let mut inside = Vec::new();
                    let mut outside = Vec::new();
                    for a in assignments {
                        if let Some(&x) = map.get(&a.subject_id) {
                            if a.cluster == cluster {
                                inside.push(x);
                            } else {
                                outside.push(x);
                            }
                        }
                    }
                    let n = inside.len() + outside.len();
                    let r = welch_t(&inside, &outside)
                        .map(|r| (r, format!("n_in={} n_out={}", inside.len(), outside.len())));
                    (TestKind::Welch, n, r)
                }
            };
            let (result, note) = match outcome {
                Ok((r, note)) if r.corrected => (Some(r), format!("{note} haldane-anscombe")),
                Ok((r, note)) => (Some(r), note),
                Err(e) => (None, e.to_string()),
            };
            rows.push(AssociationRow {
                cluster,
                question: question.clone(),
                kind,
                n,
                result,
                note,
            });
        }
    }
    rows
}

pub fn associations_to_tsv(rows: &[AssociationRow]) -> String {
    let mut out = String::from("cluster\tquestion\ttest\tn\tstatistic\tdof\tp_value\tsignificant\tnote\n");
    for r in rows {
        let (stat, dof, p, sig) = match &r.result {
            Some(t) => (
                t.statistic.to_string(),
                t.dof.map_or_else(|| "NA".to_string(), |d| d.to_string()),
                t.p_value.to_string(),
                t.significant.to_string(),
            ),
            None => ("NA".into(), "NA".into(), "NA".into(), "NA".into()),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{stat}\t{dof}\t{p}\t{sig}\t{}",
            r.cluster,
            r.question,
            r.kind.name(),
            r.n,
            r.note
        );
    }
    out
}
