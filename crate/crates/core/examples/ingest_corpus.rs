//! Read a survey export against a custom schema, routing free text through
//! a mapping dictionary, and compare strict and lenient ingestion.
//!
//! cargo run --example ingest_corpus

use mmpheno::corpus::{corpus_stats, ingest_corpus, IngestMode, MappingDictionary};
use mmpheno::QuestionSchema;

const SCHEMA: &str = r#"
[[question]]
id = "pain_level"
name = "Pain level"
vocabulary = ["none", "mild", "moderate", "severe"]

[[question]]
id = "activity"
name = "Activities affected"
free_text = true
vocabulary = ["work", "sleep", "exercise", "other"]
"#;

const DICTIONARY: &str = "#question=activity
#fallback=other
could not sleep\tsleep
missed work\twork
skipped the gym\texercise
";

const EXPORT: &str = "subject_id\tquestion_id\tresponse\tdate
p01\tpain_level\tsevere\t2017-03-01
p01\tactivity\tMissed   Work\t2017-03-01
p01\tactivity\tcould not sleep\t2017-03-02
p02\tpain_level\tmild\t2017-03-01
p02\tactivity\tgardening\t2017-03-04
p02\tpain_level\texcruciating\t2017-03-05
";

pub fn run_example() -> mmpheno::Result<()> {
    let schema = QuestionSchema::from_toml(SCHEMA)?;
    let dict = MappingDictionary::parse(DICTIONARY, &schema)?;
    println!("free text maps: 'Missed   Work' -> {}", dict.map_free_text("Missed   Work"));
    println!("unknown text falls back: 'gardening' -> {}", dict.map_free_text("gardening"));

    // 'excruciating' is not a pain_level token: strict ingestion refuses it
    let strict = ingest_corpus(EXPORT.as_bytes(), &schema, Some(&dict), IngestMode::Strict);
    println!("strict: {}", strict.as_ref().err().map(ToString::to_string).unwrap_or_default());
    assert!(strict.is_err());

    let lenient = ingest_corpus(EXPORT.as_bytes(), &schema, Some(&dict), IngestMode::Lenient)?;
    println!("lenient: kept {} records, skipped {}", lenient.corpus.num_observations(), lenient.skipped);
    for s in lenient.corpus.subjects() {
        println!("  {} tracked {:?} days, {} observations", s.id, s.days_tracked, s.len());
    }
    print!("{}", corpus_stats(&lenient.corpus, &schema)?.to_tsv());
    Ok(())
}

#[allow(dead_code)]
fn main() -> mmpheno::Result<()> {
    run_example()
}
