use std::path::Path;

use foldlm_core::harness::output::{read_canonical_json, read_table};
use foldlm_core::harness::{run_experiment, write_synthetic_corpus, Ablation, RunConfig};

fn config(dir: &Path, epochs: usize) -> RunConfig {
    let data =
        write_synthetic_corpus(&dir.join("corpus"), &["narrative", "technical"], 6000, 1).unwrap();
    let text = serde_json::json!({
        "schema_version": 1,
        "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "max_seq": 32},
        "data": data,
        "training": {"epochs": epochs, "batch_size": 4, "window": 32, "seed": 5, "max_steps_per_epoch": 6},
        "metrics": {"eval_sequences": 2, "reorder_prompts_per_category": 2, "reorder_prompt_len": 8,
                    "reorder_new_tokens": 8, "reorder_prompts": ["The cache "]},
        "output": dir.join("out"),
    });
    RunConfig::from_json(&text.to_string()).unwrap()
}

#[test]
fn compare_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2);
    let (result, files) = run_experiment(&cfg).unwrap();
    assert!(result.batches_match);
    assert!(!result.partial);
    assert_eq!(result.batch_digests.len(), 2);
    assert_eq!(result.folding.epoch_layers.len(), 2);
    assert!(result.cross_reordering.contains_key("prompt:0"));
    result.baseline.validate().unwrap();
    result.folding.validate().unwrap();
    for name in ["variance.csv", "heads.csv", "reorder.csv", "metrics.json"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    read_canonical_json(&dir.path().join("out/metrics.json")).unwrap();
    assert_eq!(
        read_table(&dir.path().join("out/variance.csv"))
            .unwrap()
            .len(),
        2
    );

    cfg.output = dir.path().join("again");
    let (_, again) = run_experiment(&cfg).unwrap();
    for (a, b) in files.iter().zip(&again) {
        if a.file_name().unwrap() == "timing.json" {
            continue;
        }
        assert_eq!(
            std::fs::read(a).unwrap(),
            std::fs::read(b).unwrap(),
            "{}",
            a.display()
        );
    }
}

#[test]
fn zero_epochs_reports_init_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let (result, _) = run_experiment(&config(dir.path(), 0)).unwrap();
    assert!(result.init_logit_max_abs_diff < 1e-6);
    assert_eq!(result.baseline.layers, result.folding.layers);
    assert_eq!(result.baseline.perplexity, result.folding.perplexity);
    assert!(result.cross_reordering.values().all(|&v| v == 0.0));
}

#[test]
fn ablation_writes_a_labelled_result_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Ablation::Cohesion.apply(&config(dir.path(), 1));
    let (result, _) = run_experiment(&cfg).unwrap();
    assert_eq!(result.ablation.as_deref(), Some("cohesion"));
    let doc = read_canonical_json(&dir.path().join("out/ablate-cohesion/metrics.json")).unwrap();
    assert_eq!(doc["ablation"], "cohesion");
    assert_eq!(
        doc["folding"]["config"]["model"]["folding"]["gamma"].as_f64(),
        Some(0.0)
    );
}

#[test]
fn training_failure_marks_partial() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2);
    cfg.training.adam.lr = 1e300;
    cfg.training.adam.clip_norm = 0.0;
    let (result, _) = run_experiment(&cfg).unwrap();
    assert!(result.partial);
    assert!(result.error.as_deref().unwrap().contains("epoch 0"));
    let doc = read_canonical_json(&dir.path().join("out/metrics.json")).unwrap();
    assert_eq!(doc["partial"], true);
}
