//! Fit the per-question model by collapsed Gibbs sampling, save and reload
//! the checkpoint, and measure how well the generating parameters are
//! recovered.
//!
//! cargo run --release --example train_model

use mmpheno::analytics::match_phenotypes;
use mmpheno::simulator::{sample_cohort, AlphaSpec, BetaSpec, GenerativeConfig, TokenCount};
use mmpheno::{train, FittedModel, Hyperparams, QuestionSchema, TrainConfig};

pub fn run_example() -> mmpheno::Result<()> {
    let cfg = GenerativeConfig {
        alpha: AlphaSpec::Symmetric(0.05),
        beta: BetaSpec::Symmetric(0.05),
        tokens_per_subject: TokenCount::Fixed { n: 80 },
        min_theta_separation: Some(1.0),
        ..GenerativeConfig::new(3, QuestionSchema::phendo(), 120, 7)
    };
    let (corpus, truth) = sample_cohort(&cfg)?;

    let hp = Hyperparams::symmetric(3, 0.01, 0.01, &cfg.schema)?;
    let train_cfg = TrainConfig {
        iters: 400,
        burn_in: 200,
        thin: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &cfg.schema, &hp, &train_cfg)?;
    let first = out.trace.first().copied().unwrap_or(0.0);
    let last = out.trace.last().copied().unwrap_or(0.0);
    println!("joint log-likelihood: sweep 1 {first:.1}, sweep {} {last:.1}", out.trace.len());

    let text = out.model.to_checkpoint_string();
    let model = FittedModel::from_checkpoint_str(&text)?;
    assert_eq!(model.theta, out.model.theta);
    println!("checkpoint: {} bytes", text.len());

    // labels are exchangeable, so align estimated phenotypes to the truth first
    let perm = match_phenotypes(&model.theta, &truth.theta_star);
    for (k, &r) in perm.iter().enumerate() {
        let l1: f64 = model.theta[k]
            .iter()
            .zip(&truth.theta_star[r])
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum::<f64>()
            / cfg.schema.num_questions() as f64;
        println!("estimated {k} ~ true {r}: mean per-question L1 {l1:.3}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
