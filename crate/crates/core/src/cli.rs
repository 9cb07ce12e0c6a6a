//! Command-line front end. Every subcommand computes all of its output in
//! memory, writes each file through a temp file and atomic rename, and then
//! records a [`RunManifest`] next to the output.
//!
//! Exit codes: 0 success (and `--help`/`--version`), 1 usage error, 2 data
//! or validation error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::{
    assignment_table, assignments_to_tsv, confident_subjects, export_heatmap, salient_responses, selection_to_tsv,
    SelectionConfig, DEFAULT_MASS,
};
use crate::corpus::{corpus_stats, Corpus, IngestMode, MappingDictionary};
use crate::error::{Error, Result};
use crate::evaluation::{cross_validate, evaluate, LeftToRight, XvalConfig, DEFAULT_PARTICLES};
use crate::inference::{train, Hyperparams};
use crate::model::{FittedModel, TrainConfig, TrainMode};
use crate::rng::PRNG_NAME;
use crate::schema::QuestionSchema;
use crate::simulator::{sample_cohort, GenerativeConfig};
use crate::validation::{associate, associations_to_tsv, confusion, parse_answers, purity, read_labels, Coarsening};

pub const MANIFEST_FORMAT: &str = "mmpheno-manifest-v1";
/// Caps the rayon worker count.
pub const THREADS_ENV: &str = "MMPHENO_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mmpheno", version, about = "Per-question mixed-membership phenotyping")]
struct Cli {
    /// Suppress progress lines on stderr
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Sample a synthetic cohort and its ground truth
    Simulate(SimulateArgs),
    /// Fit a model with collapsed Gibbs sampling
    Train(TrainArgs),
    /// Held-out log-likelihood of a corpus under a fitted model
    Evaluate(EvaluateArgs),
    /// K-fold comparison of the per-question model and the pooled baseline
    Xval(XvalArgs),
    /// Heatmap tables, salient response sets and hard assignments
    Report(ReportArgs),
    /// Sample confidently assigned subjects per phenotype
    Select(SelectArgs),
    /// Fisher / Welch tests of cluster membership against external answers
    Associate(AssociateArgs),
    /// Confusion matrix and purity of two labelings
    Agree(AgreeArgs),
    /// Per-question observation count summaries
    CorpusStats(CorpusStatsArgs),
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Skip unknown response tokens instead of failing
    #[arg(long)]
    lenient: bool,
    /// Free-text mapping dictionary
    #[arg(long)]
    dictionary: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Schema file or "phendo"
    #[arg(long, default_value = "phendo")]
    schema: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    beta: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Merge all questions into one vocabulary (vanilla LDA baseline)
    #[arg(long)]
    pooled: bool,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-sweep joint log-likelihood
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PARTICLES)]
    particles: usize,
    /// Disable resampling of earlier positions
    #[arg(long)]
    no_resample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Args, Serialize)]
struct XvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "phendo")]
    schema: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    beta: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = DEFAULT_PARTICLES)]
    particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Restrict to one question
    #[arg(long)]
    question: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MASS)]
    mass: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    #[arg(long, default_value_t = 30)]
    min_days: u32,
    #[arg(long, default_value_t = 10)]
    per_cluster: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Args, Serialize)]
struct AssociateArgs {
    #[arg(long)]
    model: PathBuf,
    /// subject_id, question, value (yes/no or a number), tab-separated
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct AgreeArgs {
    #[arg(long)]
    model_labels: PathBuf,
    #[arg(long)]
    ref_labels: PathBuf,
    /// "severe" or a label<TAB>group file
    #[arg(long)]
    coarsen: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct CorpusStatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "phendo")]
    schema: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ingest: IngestArgs,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub prng: String,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
}

/// Everything a subcommand produces, before anything touches the disk.
#[derive(Default)]
struct Plan {
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    files: Vec<(PathBuf, Vec<u8>)>,
    stdout: Option<String>,
    manifest: Option<PathBuf>,
    log: Vec<String>,
}

impl Plan {
    fn file(&mut self, path: impl Into<PathBuf>, content: impl Into<Vec<u8>>) {
        self.files.push((path.into(), content.into()));
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_schema(source: &str) -> Result<QuestionSchema> {
    QuestionSchema::load(source)
}

fn read_corpus(path: &Path, schema: &QuestionSchema, ingest: &IngestArgs, plan: &mut Plan) -> Result<Corpus> {
    let dict = match &ingest.dictionary {
        Some(d) => {
            plan.inputs.push(d.clone());
            Some(MappingDictionary::load(d, schema)?)
        }
        None => None,
    };
    let mode = if ingest.lenient { IngestMode::Lenient } else { IngestMode::Strict };
    plan.inputs.push(path.to_path_buf());
    let outcome = Corpus::read_file(path, schema, dict.as_ref(), mode)?;
    if outcome.skipped > 0 {
        plan.log.push(format!("skipped {} unrecognised records in {}", outcome.skipped, path.display()));
    }
    Ok(outcome.corpus)
}

fn schema_input(source: &str, plan: &mut Plan) {
    if source != crate::schema::BUILTIN_PHENDO {
        plan.inputs.push(PathBuf::from(source));
    }
}

fn simulate(a: &SimulateArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.config.clone());
    let mut cfg = GenerativeConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    plan.seeds.insert("seed".into(), cfg.seed);
    let (corpus, truth) = sample_cohort(&cfg)?;
    let model = truth.to_model(&cfg, &corpus)?;
    let mut labels = String::from("subject_id\tlabel\n");
    for (s, k) in corpus.subjects().iter().zip(truth.dominant_phenotypes()) {
        labels.push_str(&format!("{}\t{k}\n", s.id));
    }
    plan.file(a.out.join("corpus.tsv"), corpus.to_tsv_string(&cfg.schema)?);
    plan.file(a.out.join("truth.json"), model.to_checkpoint_string());
    plan.file(a.out.join("truth_labels.tsv"), labels);
    plan.file(a.out.join("schema.toml"), cfg.schema.to_toml());
    plan.manifest = Some(a.out.join("manifest.json"));
    plan.log.push(format!(
        "{} subjects, {} observations",
        corpus.num_subjects(),
        corpus.num_observations()
    ));
    Ok(plan)
}

fn train_cmd(a: &TrainArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    schema_input(&a.schema, &mut plan);
    let schema = load_schema(&a.schema)?;
    let corpus = read_corpus(&a.corpus, &schema, &a.ingest, &mut plan)?;
    let hp = Hyperparams::symmetric(a.k, a.alpha, a.beta, &schema)?;
    let cfg = TrainConfig {
        iters: a.iters,
        burn_in: a.burn_in,
        thin: a.thin,
        seed: a.seed,
        mode: if a.pooled { TrainMode::Pooled } else { TrainMode::PerQuestion },
    };
    plan.seeds.insert("seed".into(), a.seed);
    let start = Instant::now();
    let out = train(&corpus, &schema, &hp, &cfg)?;
    plan.log.push(format!(
        "{} sweeps over {} observations in {:.1}s, final joint log-likelihood {}",
        a.iters,
        corpus.num_observations(),
        start.elapsed().as_secs_f64(),
        out.trace.last().copied().unwrap_or(0.0)
    ));
    plan.file(&a.out, out.model.to_checkpoint_string());
    if let Some(t) = &a.trace {
        let mut s = String::from("sweep\tjoint_log_likelihood\n");
        for (i, ll) in out.trace.iter().enumerate() {
            s.push_str(&format!("{}\t{ll}\n", i + 1));
        }
        plan.file(t, s);
    }
    plan.manifest = Some(sibling_manifest(&a.out));
    Ok(plan)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.model.clone());
    let model = FittedModel::load(&a.model)?;
    let corpus = read_corpus(&a.corpus, &model.source_schema, &a.ingest, &mut plan)?;
    let opts = LeftToRight {
        particles: a.particles,
        resample: !a.no_resample,
    };
    plan.seeds.insert("seed".into(), a.seed);
    let report = evaluate(&model, &corpus, opts, a.seed)?;
    plan.log.push(format!(
        "total {} over {} tokens ({} per token)",
        report.total, report.total_tokens, report.per_token
    ));
    plan.file(&a.out, report.to_tsv());
    plan.manifest = Some(sibling_manifest(&a.out));
    Ok(plan)
}

fn xval_cmd(a: &XvalArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    schema_input(&a.schema, &mut plan);
    let schema = load_schema(&a.schema)?;
    let corpus = read_corpus(&a.corpus, &schema, &a.ingest, &mut plan)?;
    let cfg = XvalConfig {
        k: a.k,
        alpha: a.alpha,
        beta: a.beta,
        n_folds: a.folds,
        train: TrainConfig {
            iters: a.iters,
            burn_in: a.burn_in,
            thin: a.thin,
            seed: 0,
            mode: TrainMode::PerQuestion,
        },
        eval: LeftToRight {
            particles: a.particles,
            resample: true,
        },
        seed: a.seed,
    };
    plan.seeds.insert("seed".into(), a.seed);
    let report = cross_validate(&corpus, &schema, &cfg)?;
    plan.file(&a.out, report.to_tsv());
    plan.manifest = Some(sibling_manifest(&a.out));
    Ok(plan)
}

fn report_cmd(a: &ReportArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.model.clone());
    plan.seeds.insert("seed".into(), a.seed);
    let model = FittedModel::load(&a.model)?;
    let questions: Vec<String> = match &a.question {
        Some(q) => vec![q.clone()],
        None => model.schema.questions().iter().map(|q| q.id.clone()).collect(),
    };
    for qid in &questions {
        let heat = export_heatmap(&model, qid)?;
        plan.file(a.out.join(format!("heatmap_{qid}.tsv")), heat.to_tsv());
        let mut salient = String::from("phenotype\ttoken\tprobability\trelative_weight\n");
        for k in 0..model.k() {
            salient_responses(&model, qid, k, a.mass)?.to_tsv_rows(&mut salient);
        }
        plan.file(a.out.join(format!("salient_{qid}.tsv")), salient);
    }
    plan.file(a.out.join("assignments.tsv"), assignments_to_tsv(&assignment_table(&model)));
    plan.manifest = Some(a.out.join("manifest.json"));
    Ok(plan)
}

fn select_cmd(a: &SelectArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.model.clone());
    let model = FittedModel::load(&a.model)?;
    let corpus = read_corpus(&a.corpus, &model.source_schema, &a.ingest, &mut plan)?;
    let cfg = SelectionConfig {
        threshold: a.threshold,
        min_days: a.min_days,
        per_cluster: a.per_cluster,
        seed: a.seed,
    };
    plan.seeds.insert("seed".into(), a.seed);
    let table = selection_to_tsv(&confident_subjects(&model, &corpus, &cfg)?);
    emit(&mut plan, a.out.as_deref(), table);
    Ok(plan)
}

fn associate_cmd(a: &AssociateArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.model.clone());
    plan.inputs.push(a.answers.clone());
    plan.seeds.insert("seed".into(), a.seed);
    let model = FittedModel::load(&a.model)?;
    let text = std::fs::read_to_string(&a.answers).map_err(|e| Error::io(&a.answers, e))?;
    let answers = parse_answers(&text)?;
    let rows = associate(&assignment_table(&model), &answers, model.k());
    plan.file(&a.out, associations_to_tsv(&rows));
    plan.manifest = Some(sibling_manifest(&a.out));
    Ok(plan)
}

fn agree_cmd(a: &AgreeArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    plan.inputs.push(a.model_labels.clone());
    plan.inputs.push(a.ref_labels.clone());
    plan.seeds.insert("seed".into(), a.seed);
    let coarsen = match &a.coarsen {
        Some(c) => {
            if c != crate::validation::SEVERE_ZERO_NAME {
                plan.inputs.push(PathBuf::from(c));
            }
            Some(Coarsening::load(c)?)
        }
        None => None,
    };
    let m = confusion(&read_labels(&a.model_labels)?, &read_labels(&a.ref_labels)?, coarsen.as_ref())?;
    let mut out = m.to_tsv();
    out.push_str(&format!("\npurity\t{}\n", purity(&m)?));
    emit(&mut plan, a.out.as_deref(), out);
    Ok(plan)
}

fn corpus_stats_cmd(a: &CorpusStatsArgs) -> Result<Plan> {
    let mut plan = Plan::default();
    schema_input(&a.schema, &mut plan);
    plan.seeds.insert("seed".into(), a.seed);
    let schema = load_schema(&a.schema)?;
    let corpus = read_corpus(&a.corpus, &schema, &a.ingest, &mut plan)?;
    emit(&mut plan, a.out.as_deref(), corpus_stats(&corpus, &schema)?.to_tsv());
    Ok(plan)
}

fn emit(plan: &mut Plan, out: Option<&Path>, content: String) {
    match out {
        Some(p) => {
            plan.file(p, content);
            plan.manifest = Some(sibling_manifest(p));
        }
        None => plan.stdout = Some(content),
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn execute<O: Write + ?Sized, E: Write + ?Sized>(
    command: &Command,
    quiet: bool,
    argv: &[String],
    started: Instant,
    out: &mut O,
    err: &mut E,
) -> Result<()> {
    let plan = match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Xval(a) => xval_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Associate(a) => associate_cmd(a),
        Command::Agree(a) => agree_cmd(a),
        Command::CorpusStats(a) => corpus_stats_cmd(a),
    }?;

    let mut inputs = BTreeMap::new();
    for p in &plan.inputs {
        inputs.insert(p.display().to_string(), hash_file(p)?);
    }
    let mut outputs = BTreeMap::new();
    for (path, bytes) in &plan.files {
        outputs.insert(path.display().to_string(), sha256_hex(bytes));
    }
    let flags = serde_json::to_value(command).expect("flags serialise");
    let name = flags
        .as_object()
        .and_then(|o| o.keys().next().cloned())
        .unwrap_or_default();
    let flags = flags.as_object().and_then(|o| o.values().next().cloned()).unwrap_or_default();

    if !quiet {
        for line in &plan.log {
            writeln!(err, "mmpheno {name}: {line}").map_err(|e| Error::io("<stderr>", e))?;
        }
    }
    for (path, bytes) in &plan.files {
        write_atomic(path, bytes)?;
    }
    if let Some(s) = &plan.stdout {
        write!(out, "{s}").map_err(|e| Error::io("<stdout>", e))?;
    }
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name,
        argv: argv.to_vec(),
        flags,
        seeds: plan.seeds,
        prng: PRNG_NAME.into(),
        threads: rayon::current_num_threads(),
        inputs,
        outputs,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    match &plan.manifest {
        Some(p) => {
            let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
            text.push('\n');
            write_atomic(p, text.as_bytes())?;
        }
        None => writeln!(err, "{}", serde_json::to_string(&manifest).expect("manifest serialises"))
            .map_err(|e| Error::io("<stderr>", e))?,
    }
    Ok(())
}

fn thread_count() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        },
        Err(_) => Ok(None),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with caller-supplied stdout and stderr.
pub fn run_with<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let started = Instant::now();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return 1;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match pool.install(|| execute(&cli.command, cli.quiet, &argv, started, out, err)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
