//! Grouped observation data: per-subject multisets of (question, response)
//! tokens, the line-delimited corpus format, free-text mapping and
//! descriptive statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schema::QuestionSchema;

pub const CORPUS_HEADER: &str = "subject_id\tquestion_id\tresponse";
pub const CORPUS_HEADER_DATED: &str = "subject_id\tquestion_id\tresponse\tdate";

/// One response: an index into the schema's questions and an index into
/// that question's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub question: u32,
    pub token: u32,
    pub date: Option<NaiveDate>,
}

impl Observation {
    pub fn new(question: usize, token: usize) -> Self {
        Observation {
            question: question as u32,
            token: token as u32,
            date: None,
        }
    }

    pub fn dated(question: usize, token: usize, date: NaiveDate) -> Self {
        Observation {
            date: Some(date),
            ..Observation::new(question, token)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub id: String,
    pub observations: Vec<Observation>,
    /// Distinct calendar dates with at least one record; `None` when the
    /// source carried no dates for this subject.
    pub days_tracked: Option<u32>,
}

impl Subject {
    /// Builds a subject, deriving `days_tracked` from observation dates.
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Self {
        let dates: BTreeSet<NaiveDate> = observations.iter().filter_map(|o| o.date).collect();
        let days_tracked = (!dates.is_empty()).then_some(dates.len() as u32);
        Subject {
            id: id.into(),
            observations,
            days_tracked,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Immutable collection of subjects bound to one schema (by hash).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    schema_hash: String,
    subjects: Vec<Subject>,
}

impl Corpus {
    /// Validates subject ids and every observation index against `schema`.
    pub fn new(schema: &QuestionSchema, subjects: Vec<Subject>) -> Result<Self> {
        let mut seen = HashMap::with_capacity(subjects.len());
        for (i, s) in subjects.iter().enumerate() {
            if s.id.is_empty() || s.id.contains(['\t', '\n', '\r']) {
                return Err(Error::Config(format!("invalid subject id {:?}", s.id)));
            }
            if seen.insert(s.id.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate subject id '{}'", s.id)));
            }
            for o in &s.observations {
                let q = o.question as usize;
                if q >= schema.num_questions() || o.token as usize >= schema.vocab_size(q) {
                    return Err(Error::Config(format!(
                        "observation ({}, {}) of subject '{}' is outside the schema",
                        o.question, o.token, s.id
                    )));
                }
            }
        }
        Ok(Corpus {
            schema_hash: schema.hash().to_string(),
            subjects,
        })
    }

    pub fn empty(schema: &QuestionSchema) -> Self {
        Corpus {
            schema_hash: schema.hash().to_string(),
            subjects: Vec::new(),
        }
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn ensure_schema(&self, schema: &QuestionSchema) -> Result<()> {
        if self.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: schema.hash().to_string(),
                found: self.schema_hash.clone(),
            });
        }
        Ok(())
    }

    /// Corpus restricted to the given subject indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            schema_hash: self.schema_hash.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Rewrites every observation onto the single merged question of
    /// [`QuestionSchema::pooled`].
    pub fn pooled(&self, schema: &QuestionSchema) -> Result<(QuestionSchema, Corpus)> {
        self.ensure_schema(schema)?;
        let pooled_schema = schema.pooled();
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                observations: s
                    .observations
                    .iter()
                    .map(|o| Observation {
                        question: 0,
                        token: (schema.offset(o.question as usize) + o.token as usize) as u32,
                        date: o.date,
                    })
                    .collect(),
                days_tracked: s.days_tracked,
            })
            .collect();
        let corpus = Corpus {
            schema_hash: pooled_schema.hash().to_string(),
            subjects,
        };
        Ok((pooled_schema, corpus))
    }

    /// Hex SHA-256 over the canonical corpus content (schema hash included).
    pub fn content_hash(&self) -> String {
        let mut canon = format!("mmpheno-corpus-v1\n{}\n", self.schema_hash);
        for s in &self.subjects {
            let _ = writeln!(canon, "S\t{}\t{:?}", s.id, s.days_tracked);
            for o in &s.observations {
                let _ = writeln!(canon, "{}\t{}\t{:?}", o.question, o.token, o.date);
            }
        }
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    /// Writes the line-delimited corpus format. A date column is emitted
    /// when any observation carries a date.
    pub fn write_tsv<W: Write>(&self, schema: &QuestionSchema, mut out: W) -> Result<()> {
        self.ensure_schema(schema)?;
        let dated = self
            .subjects
            .iter()
            .any(|s| s.observations.iter().any(|o| o.date.is_some()));
        let io = |e| Error::io("<corpus output>", e);
        writeln!(out, "{}", if dated { CORPUS_HEADER_DATED } else { CORPUS_HEADER }).map_err(io)?;
        for s in &self.subjects {
            for o in &s.observations {
                let q = schema.question(o.question as usize);
                write!(out, "{}\t{}\t{}", s.id, q.id, q.vocabulary[o.token as usize]).map_err(io)?;
                if dated {
                    match o.date {
                        Some(d) => write!(out, "\t{}", d.format("%Y-%m-%d")).map_err(io)?,
                        None => write!(out, "\t").map_err(io)?,
                    }
                }
                writeln!(out).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn to_tsv_string(&self, schema: &QuestionSchema) -> Result<String> {
        let mut buf = Vec::new();
        self.write_tsv(schema, &mut buf)?;
        Ok(String::from_utf8(buf).expect("corpus output is UTF-8"))
    }

    pub fn read_file(
        path: impl AsRef<Path>,
        schema: &QuestionSchema,
        dict: Option<&MappingDictionary>,
        mode: IngestMode,
    ) -> Result<IngestOutcome> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ingest_corpus(std::io::BufReader::new(file), schema, dict, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    /// Unknown responses abort ingestion.
    #[default]
    Strict,
    /// Unknown responses are skipped and counted.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    /// Records dropped in lenient mode.
    pub skipped: usize,
}

/// Parses a corpus record stream against `schema`.
///
/// The first non-comment line must be the header. Subjects appear in order
/// of first appearance; observation order within a subject is preserved.
/// Free-text questions accept an exact vocabulary token first and otherwise
/// route the raw text through `dict`.
pub fn ingest_corpus<R: BufRead>(
    reader: R,
    schema: &QuestionSchema,
    dict: Option<&MappingDictionary>,
    mode: IngestMode,
) -> Result<IngestOutcome> {
    if let Some(d) = dict {
        d.ensure_schema(schema)?;
    }
    let mut order: Vec<(String, Vec<Observation>)> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut has_date_column: Option<bool> = None;
    let mut skipped = 0;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Ingest {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(dated) = has_date_column else {
            has_date_column = Some(match line {
                CORPUS_HEADER => false,
                CORPUS_HEADER_DATED => true,
                other => {
                    return Err(Error::Ingest {
                        line: line_no,
                        message: format!(
                            "expected header '{}' (optionally with '\\tdate'), found {other:?}",
                            CORPUS_HEADER.replace('\t', "\\t")
                        ),
                    })
                }
            });
            continue;
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = if dated { 4 } else { 3 };
        if fields.len() != expected {
            return Err(Error::Ingest {
                line: line_no,
                message: format!("expected {expected} tab-separated fields, found {}", fields.len()),
            });
        }
        let subject_id = fields[0].trim();
        if subject_id.is_empty() {
            return Err(Error::Ingest {
                line: line_no,
                message: "empty subject_id".into(),
            });
        }
        let q = schema.question_index(fields[1].trim()).ok_or_else(|| Error::Ingest {
            line: line_no,
            message: format!("unknown question_id '{}'", fields[1].trim()),
        })?;
        let response = fields[2];
        let token = match schema.token_index(q, response) {
            Some(v) => Some(v),
            None if schema.question(q).free_text => match dict {
                Some(d) if d.question_index() == q => {
                    schema.token_index(q, d.map_free_text(response))
                }
                _ => None,
            },
            None => None,
        };
        let Some(token) = token else {
            match mode {
                IngestMode::Strict => {
                    return Err(Error::Ingest {
                        line: line_no,
                        message: format!(
                            "unknown response '{response}' for question '{}'",
                            schema.question(q).id
                        ),
                    })
                }
                IngestMode::Lenient => {
                    skipped += 1;
                    continue;
                }
            }
        };
        let date = if dated { parse_date(fields[3], line_no)? } else { None };
        let obs = Observation {
            question: q as u32,
            token: token as u32,
            date,
        };
        let slot = *by_id.entry(subject_id.to_string()).or_insert_with(|| {
            order.push((subject_id.to_string(), Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(obs);
    }

    let subjects = order
        .into_iter()
        .map(|(id, obs)| Subject::new(id, obs))
        .collect();
    Ok(IngestOutcome {
        corpus: Corpus::new(schema, subjects)?,
        skipped,
    })
}

fn parse_date(field: &str, line: usize) -> Result<Option<NaiveDate>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    // date or date-time; only the calendar date matters
    let date_part = match field.char_indices().nth(10) {
        Some((i, 'T' | ' ')) => &field[..i],
        Some(_) => field,
        None => field,
    };
    NaiveDate::parse_from_str(date_part, "%Y-%m-%d")
        .map(Some)
        .map_err(|e| Error::Ingest {
            line,
            message: format!("invalid ISO-8601 date '{field}': {e}"),
        })
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_free_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps normalised free text onto one question's vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingDictionary {
    question_id: String,
    question_index: usize,
    schema_hash: String,
    entries: HashMap<String, String>,
    fallback: String,
}

impl MappingDictionary {
    /// Validates that every target (and the fallback) is a token of the
    /// designated question.
    pub fn new(
        schema: &QuestionSchema,
        question_id: &str,
        entries: impl IntoIterator<Item = (String, String)>,
        fallback: &str,
    ) -> Result<Self> {
        let q = schema
            .question_index(question_id)
            .ok_or_else(|| Error::Dictionary(format!("unknown target question '{question_id}'")))?;
        if schema.token_index(q, fallback).is_none() {
            return Err(Error::Dictionary(format!(
                "fallback token '{fallback}' is not in the vocabulary of '{question_id}'"
            )));
        }
        let mut map = HashMap::new();
        for (raw, target) in entries {
            if schema.token_index(q, &target).is_none() {
                return Err(Error::Dictionary(format!(
                    "target '{target}' for '{raw}' is not in the vocabulary of '{question_id}'"
                )));
            }
            let key = normalize_free_text(&raw);
            if let Some(prev) = map.insert(key.clone(), target.clone()) {
                if prev != target {
                    return Err(Error::Dictionary(format!(
                        "'{key}' maps to both '{prev}' and '{target}'"
                    )));
                }
            }
        }
        Ok(MappingDictionary {
            question_id: question_id.to_string(),
            question_index: q,
            schema_hash: schema.hash().to_string(),
            entries: map,
            fallback: fallback.to_string(),
        })
    }

    /// Parses the dictionary format: `#question=<id>` and `#fallback=<token>`
    /// header lines, then `raw text<TAB>token` rows.
    pub fn parse(text: &str, schema: &QuestionSchema) -> Result<Self> {
        let mut question = None;
        let mut fallback = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.strip_prefix("question=") {
                    question = Some(v.trim().to_string());
                } else if let Some(v) = rest.strip_prefix("fallback=") {
                    fallback = Some(v.trim().to_string());
                }
                continue;
            }
            let (raw, target) = line.split_once('\t').ok_or_else(|| {
                Error::Dictionary(format!("line {}: expected 'text<TAB>token'", i + 1))
            })?;
            entries.push((raw.to_string(), target.trim().to_string()));
        }
        let question =
            question.ok_or_else(|| Error::Dictionary("missing '#question=' header".into()))?;
        let fallback =
            fallback.ok_or_else(|| Error::Dictionary("missing '#fallback=' header".into()))?;
        Self::new(schema, &question, entries, &fallback)
    }

    pub fn load(path: impl AsRef<Path>, schema: &QuestionSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, schema)
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn question_index(&self) -> usize {
        self.question_index
    }

    pub fn fallback(&self) -> &str {
        &self.fallback
    }

    fn ensure_schema(&self, schema: &QuestionSchema) -> Result<()> {
        if self.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: schema.hash().to_string(),
                found: self.schema_hash.clone(),
            });
        }
        Ok(())
    }

    /// Case- and whitespace-insensitive lookup; misses return the fallback.
    pub fn map_free_text(&self, raw: &str) -> &str {
        self.entries
            .get(&normalize_free_text(raw))
            .map(String::as_str)
            .unwrap_or(&self.fallback)
    }
}

/// Order statistics of per-subject observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSummary {
    pub label: String,
    pub median: f64,
    pub mean: f64,
    /// Nearest-rank 95th percentile.
    pub p95: u64,
    pub max: u64,
}

impl CountSummary {
    pub fn from_counts(label: impl Into<String>, counts: &[u64]) -> Self {
        let label = label.into();
        if counts.is_empty() {
            return CountSummary {
                label,
                median: 0.0,
                mean: 0.0,
                p95: 0,
                max: 0,
            };
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mean = sorted.iter().sum::<u64>() as f64 / n as f64;
        // nearest rank: ceil(0.95 n), computed in integers
        let rank = (95 * n).div_ceil(100).max(1);
        CountSummary {
            label,
            median,
            mean,
            p95: sorted[rank - 1],
            max: sorted[n - 1],
        }
    }
}

/// Per-question rows (schema order) followed by the total row.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub per_question: Vec<CountSummary>,
    pub total: CountSummary,
}

impl CorpusStats {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("question\tmedian\tmean\tp95\tmax\n");
        for row in self.per_question.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3}\t{}\t{}",
                row.label, row.median, row.mean, row.p95, row.max
            );
        }
        out
    }
}

/// Per-question and total summaries of per-subject observation counts.
/// Subjects that never answered a question contribute a zero.
pub fn corpus_stats(corpus: &Corpus, schema: &QuestionSchema) -> Result<CorpusStats> {
    corpus.ensure_schema(schema)?;
    let nq = schema.num_questions();
    let mut per_q: Vec<Vec<u64>> = vec![Vec::with_capacity(corpus.num_subjects()); nq];
    let mut totals = Vec::with_capacity(corpus.num_subjects());
    for s in corpus.subjects() {
        let mut counts = vec![0u64; nq];
        for o in &s.observations {
            counts[o.question as usize] += 1;
        }
        totals.push(counts.iter().sum());
        for (col, c) in per_q.iter_mut().zip(counts) {
            col.push(c);
        }
    }
    Ok(CorpusStats {
        per_question: schema
            .questions()
            .iter()
            .zip(&per_q)
            .map(|(q, counts)| CountSummary::from_counts(q.id.clone(), counts))
            .collect(),
        total: CountSummary::from_counts("total", &totals),
    })
}
