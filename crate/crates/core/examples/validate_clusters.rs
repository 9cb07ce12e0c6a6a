//! External validation: agreement with reference labels (confusion matrix
//! and purity, optionally after coarsening) and per-cluster association
//! tests against questionnaire answers.
//!
//! cargo run --example validate_clusters

use std::collections::BTreeMap;

use mmpheno::analytics::Assignment;
use mmpheno::validation::{
    associate, associations_to_tsv, confusion, fisher_exact, parse_answers, purity, welch_t, Coarsening,
    ContingencyTable2x2,
};

const ANSWERS: &str = "subject_id\tquestion\tvalue
s1\tprior_surgery\tyes
s2\tprior_surgery\tyes
s3\tprior_surgery\tno
s4\tprior_surgery\tno
s5\tprior_surgery\tno
s6\tprior_surgery\tyes
s1\tage_at_diagnosis\t24
s2\tage_at_diagnosis\t29
s3\tage_at_diagnosis\t35
s4\tage_at_diagnosis\t41
s5\tage_at_diagnosis\t38
s6\tage_at_diagnosis\t27
";

fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(s, l)| (s.to_string(), l.to_string())).collect()
}

pub fn run_example() -> mmpheno::Result<()> {
    let model = labels(&[("s1", "0"), ("s2", "0"), ("s3", "1"), ("s4", "1"), ("s5", "2"), ("s6", "0")]);
    // phenotype assigned by a clinician reading the same diaries
    let expert = labels(&[("s1", "0"), ("s2", "0"), ("s3", "2"), ("s4", "1"), ("s5", "2"), ("s6", "1")]);

    let m = confusion(&model, &expert, None)?;
    print!("{}", m.to_tsv());
    println!("purity {:.3}", purity(&m)?);

    // phenotype 0 -> severe, everything else non-severe, on both sides
    let coarse = confusion(&model, &expert, Some(&Coarsening::SevereZero))?;
    print!("{}", coarse.to_tsv());
    println!("coarsened purity {:.3}", purity(&coarse)?);

    let f = fisher_exact(&ContingencyTable2x2::new(8, 2, 1, 5))?;
    println!("fisher: odds ratio {} p {:.4}", f.statistic, f.p_value);
    let w = welch_t(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])?;
    println!("welch: t {:.4} dof {:.4} p {:.4}", w.statistic, w.dof.unwrap_or(f64::NAN), w.p_value);

    let assignments: Vec<Assignment> = model
        .iter()
        .map(|(s, l)| Assignment {
            subject_id: s.clone(),
            cluster: l.parse().unwrap(),
            max_probability: 1.0,
            phi: vec![],
        })
        .collect();
    let answers = parse_answers(ANSWERS)?;
    print!("{}", associations_to_tsv(&associate(&assignments, &answers, 3)));
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
