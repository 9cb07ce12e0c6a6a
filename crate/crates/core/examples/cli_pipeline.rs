//! Drive the command-line pipeline in-process: simulate, train, evaluate,
//! then read back the run manifest that records seeds and output hashes.
//!
//! cargo run --release --example cli_pipeline

use std::path::Path;

fn mmpheno(args: &[&str]) -> i32 {
    let mut argv = vec!["mmpheno", "--quiet"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = mmpheno::cli::run_with(argv, &mut out, &mut err);
    if code != 0 {
        eprint!("{}", String::from_utf8_lossy(&err));
    }
    code
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(
        dir.path().join("sim.toml"),
        "k = 3\nschema = \"phendo\"\nsubjects = 40\nalpha = 0.1\nbeta = 0.05\nseed = 1\n\n[tokens_per_subject]\nkind = \"fixed\"\nn = 25\n",
    )?;

    let steps: [Vec<String>; 3] = [
        ["simulate", "--config", &path("sim.toml"), "--out", &path("sim")].map(String::from).to_vec(),
        [
            "train", "--corpus", &path("sim/corpus.tsv"), "--k", "3", "--iters", "200", "--burn-in", "100",
            "--seed", "2", "--out", &path("model.json"),
        ]
        .map(String::from)
        .to_vec(),
        ["evaluate", "--model", &path("model.json"), "--corpus", &path("sim/corpus.tsv"), "--out", &path("eval.tsv")]
            .map(String::from)
            .to_vec(),
    ];
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        assert_eq!(mmpheno(&args), 0, "{} failed", args[0]);
        println!("ran {}", args[0]);
    }

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path("eval.tsv.manifest.json"))?)?;
    println!("command {} seeds {} prng {}", manifest["command"], manifest["seeds"], manifest["prng"]);
    for (file, hash) in manifest["outputs"].as_object().into_iter().flatten() {
        let name = Path::new(file).file_name().unwrap_or_default().to_string_lossy();
        println!("  {name} sha256 {}", &hash.as_str().unwrap_or_default()[..16]);
    }
    let eval = std::fs::read_to_string(path("eval.tsv"))?;
    if let Some(line) = eval.lines().find(|l| l.starts_with("#per_token")) {
        println!("{line}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
