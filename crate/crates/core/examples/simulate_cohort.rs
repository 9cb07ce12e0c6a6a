//! Draw a synthetic cohort from the generative model and inspect it.
//!
//! cargo run --example simulate_cohort

use mmpheno::corpus::corpus_stats;
use mmpheno::simulator::{sample_cohort, AlphaSpec, BetaSpec, GenerativeConfig, TokenCount};
use mmpheno::QuestionSchema;

pub fn run_example() -> mmpheno::Result<()> {
    let cfg = GenerativeConfig {
        alpha: AlphaSpec::Symmetric(0.1),
        beta: BetaSpec::Symmetric(0.05),
        tokens_per_subject: TokenCount::Lognormal { mu: 3.0, sigma: 1.0, cap: 500 },
        min_theta_separation: Some(0.8),
        ..GenerativeConfig::new(3, QuestionSchema::phendo(), 40, 2024)
    };
    let (corpus, truth) = sample_cohort(&cfg)?;
    println!("{} subjects, {} observations", corpus.num_subjects(), corpus.num_observations());

    let stats = corpus_stats(&corpus, &cfg.schema)?;
    print!("{}", stats.to_tsv());

    let dominant = truth.dominant_phenotypes();
    for k in 0..cfg.k {
        let n = dominant.iter().filter(|&&d| d == k).count();
        println!("phenotype {k}: dominant in {n} subjects");
    }

    // same seed, same cohort
    let (again, _) = sample_cohort(&cfg)?;
    assert_eq!(corpus.to_tsv_string(&cfg.schema)?, again.to_tsv_string(&cfg.schema)?);

    let tsv = corpus.to_tsv_string(&cfg.schema)?;
    println!("first records:");
    for line in tsv.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
