use std::path::Path;
use std::process::{Command, Output};

use foldlm_core::harness::write_synthetic_corpus;

fn foldlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foldlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// A tiny run configuration over a fresh two-category corpus.
fn write_config(dir: &Path) -> String {
    let data =
        write_synthetic_corpus(&dir.join("corpus"), &["dialogue", "technical"], 5000, 2).unwrap();
    let json = serde_json::json!({
        "schema_version": 1,
        "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "max_seq": 32},
        "data": data,
        "training": {"epochs": 1, "batch_size": 4, "window": 32, "seed": 3, "max_steps_per_epoch": 4},
        "metrics": {"eval_sequences": 2, "reorder_prompts_per_category": 1, "reorder_prompt_len": 8,
                    "reorder_new_tokens": 8},
        "output": "out"
    });
    let path = dir.join("run.json");
    std::fs::write(&path, json.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn compare_twice_gives_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    for out in [&first, &second] {
        let run = foldlm(&[
            "compare",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            run.status.success(),
            "{}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
    for name in ["variance.csv", "heads.csv", "reorder.csv", "metrics.json"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let header = std::fs::read_to_string(first.join("variance.csv")).unwrap();
    assert!(header.starts_with("layer,baseline,hfu,change_pct\n"));
}

#[test]
fn relative_output_resolves_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = foldlm(&["compare", "--config", &config, "--ablate", "cohesion"]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(dir.path().join("out/ablate-cohesion/metrics.json").exists());
}

#[test]
fn train_then_project_and_measure() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("model");
    let run = foldlm(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists() && out.join("report.json").exists());

    let csv = dir.path().join("proj.csv");
    let run = foldlm(&[
        "project",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--text",
        "the cache",
        "--layer",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 10);

    let run = foldlm(&[
        "metrics",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &config,
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert!(report["perplexity"]["dialogue"].as_f64().unwrap() > 1.0);
}

#[test]
fn fold_demo_is_seeded() {
    let a = foldlm(&["fold-demo", "--seed", "4", "--steps", "20"]);
    let b = foldlm(&["fold-demo", "--seed", "4", "--steps", "20"]);
    let c = foldlm(&["fold-demo", "--seed", "5", "--steps", "20"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(foldlm(&["compare"]).status.code(), Some(1));
    assert_eq!(
        foldlm(&["compare", "--config", "/no/such/run.json"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(foldlm(&["fold-demo", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        foldlm(&["compare", "--config", "x", "--ablate", "everything"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(foldlm(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1}"#).unwrap();
    let run = foldlm(&["compare", "--config", bad.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).starts_with("error:"));
}
