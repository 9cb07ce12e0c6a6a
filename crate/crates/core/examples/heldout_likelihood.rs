//! Score held-out subjects with the left-to-right estimator and compare
//! the per-question model against the pooled single-vocabulary baseline by
//! cross-validation.
//!
//! cargo run --release --example heldout_likelihood

use mmpheno::evaluation::{cross_validate, evaluate, LeftToRight, XvalConfig};
use mmpheno::simulator::{sample_cohort, AlphaSpec, BetaSpec, GenerativeConfig, TokenCount};
use mmpheno::{train, Hyperparams, QuestionSchema, TrainConfig, TrainMode};

pub fn run_example() -> mmpheno::Result<()> {
    let cfg = GenerativeConfig {
        alpha: AlphaSpec::Symmetric(0.1),
        beta: BetaSpec::Symmetric(0.05),
        tokens_per_subject: TokenCount::Fixed { n: 30 },
        ..GenerativeConfig::new(3, QuestionSchema::phendo(), 60, 11)
    };
    let (corpus, _) = sample_cohort(&cfg)?;
    let (heldout, _) = sample_cohort(&GenerativeConfig { subjects: 5, seed: 12, ..cfg.clone() })?;

    let train_cfg = TrainConfig {
        iters: 300,
        burn_in: 150,
        thin: 10,
        seed: 3,
        mode: TrainMode::PerQuestion,
    };
    let hp = Hyperparams::symmetric(3, 0.01, 0.01, &cfg.schema)?;
    let model = train(&corpus, &cfg.schema, &hp, &train_cfg)?.model;
    let report = evaluate(&model, &heldout, LeftToRight::default(), 5)?;
    print!("{}", report.to_tsv());

    let xval = cross_validate(
        &corpus,
        &cfg.schema,
        &XvalConfig {
            k: 3,
            alpha: 0.01,
            beta: 0.01,
            n_folds: 3,
            train: train_cfg,
            eval: LeftToRight { particles: 20, resample: true },
            seed: 9,
        },
    )?;
    print!("{}", xval.to_tsv());
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
