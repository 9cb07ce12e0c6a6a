//! Turn a fitted model into readable artefacts: salient responses per
//! phenotype, heatmap tables, hard assignments and a sample of confidently
//! assigned subjects for review.
//!
//! cargo run --release --example interpret_phenotypes

use mmpheno::analytics::{
    assignment_table, confident_subjects, export_heatmap, salient_responses, selection_to_tsv, SelectionConfig,
};
use mmpheno::simulator::{sample_cohort, AlphaSpec, BetaSpec, GenerativeConfig, TokenCount};
use mmpheno::{train, Hyperparams, QuestionSchema, TrainConfig};

pub fn run_example() -> mmpheno::Result<()> {
    let cfg = GenerativeConfig {
        alpha: AlphaSpec::Symmetric(0.02),
        beta: BetaSpec::Symmetric(0.05),
        tokens_per_subject: TokenCount::Fixed { n: 60 },
        min_theta_separation: Some(1.0),
        ..GenerativeConfig::new(3, QuestionSchema::phendo(), 90, 21)
    };
    let (corpus, _) = sample_cohort(&cfg)?;
    let hp = Hyperparams::symmetric(3, 0.01, 0.01, &cfg.schema)?;
    let model = train(
        &corpus,
        &cfg.schema,
        &hp,
        &TrainConfig { iters: 300, burn_in: 150, thin: 10, seed: 4, ..TrainConfig::default() },
    )?
    .model;

    let question = cfg.schema.question(0).id.clone();
    for k in 0..model.k() {
        let set = salient_responses(&model, &question, k, 0.8)?;
        let words: Vec<String> = set
            .entries
            .iter()
            .map(|e| format!("{} ({:.2}, weight {:.2})", e.token, e.probability, e.relative_weight))
            .collect();
        println!("phenotype {k}, {question}: {}", words.join(", "));
    }
    print!("{}", export_heatmap(&model, &question)?.to_tsv());

    let table = assignment_table(&model);
    for k in 0..model.k() {
        println!("cluster {k}: {} subjects", table.iter().filter(|a| a.cluster == k).count());
    }

    let picked = confident_subjects(
        &model,
        &corpus,
        &SelectionConfig { threshold: 0.9, min_days: 5, per_cluster: 2, seed: 8 },
    )?;
    print!("{}", selection_to_tsv(&picked));
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
