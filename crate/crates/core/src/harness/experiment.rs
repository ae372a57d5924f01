use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::corpus::{load_corpus, Dataset};
use crate::math::RngState;
use crate::metrics::{
    layer_metrics, perplexity, token_reordering_frequency, training_overhead, MetricsReport,
};
use crate::model::{
    generate, logits, tokenize, train_step, Decoding, ModelConfig, OptimizerState, Parameters,
};

/// Non-overlapping training windows of `window + 1` tokens from every category.
pub fn training_windows(datasets: &[Dataset], window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for d in datasets {
        let mut start = 0;
        while start + window < d.train.len() {
            out.push(d.train[start..start + window + 1].to_vec());
            start += window;
        }
    }
    out
}

/// Window indices per batch for one epoch: a seeded shuffle cut into `batch_size` chunks
/// (the last one may be short).
pub fn batch_schedule(count: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    RngState::new(seed).fork(epoch as u64).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// SHA-256 over the little-endian token ids of a batch, windows separated by their length.
pub fn batch_hash(batch: &[&Vec<usize>]) -> [u8; 32] {
    let mut h = Sha256::new();
    for w in batch {
        h.update((w.len() as u64).to_le_bytes());
        for &t in w.iter() {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Baseline and folding reports from one run, plus the cross-checks tying them together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub baseline: MetricsReport,
    pub folding: MetricsReport,
    /// Largest logit difference between the two models before any training.
    pub init_logit_max_abs_diff: f64,
    /// Per epoch: digest over the hashes of every batch, in order.
    pub batch_digests: Vec<String>,
    /// Both models saw the same batches in the same order.
    pub batches_match: bool,
    /// Reordering between the two models' greedy continuations, per category and per
    /// configured prompt (`prompt:<index>`).
    pub cross_reordering: BTreeMap<String, f64>,
    /// Training stopped early on an error.
    pub partial: bool,
    pub error: Option<String>,
    pub ablation: Option<String>,
}

impl ComparisonResult {
    /// Mean per-epoch training-time overhead of the folding model, in percent.
    pub fn overhead_pct(&self) -> Result<f64> {
        training_overhead(&self.baseline.epoch_seconds, &self.folding.epoch_seconds)
    }
}

struct ModelRun {
    cfg: ModelConfig,
    params: Parameters,
    state: OptimizerState,
    report: MetricsReport,
    hashes: Vec<Vec<[u8; 32]>>,
}

impl ModelRun {
    fn new(cfg: ModelConfig, run: &RunConfig) -> Result<ModelRun> {
        let params = Parameters::init(&cfg)?;
        let state = OptimizerState::new(&params, run.training.adam.clone());
        let mut config = serde_json::to_value(run).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(obj) = config.as_object_mut() {
            obj.remove("output");
        }
        let report = MetricsReport {
            config,
            ..MetricsReport::default()
        };
        Ok(ModelRun {
            cfg,
            params,
            state,
            report,
            hashes: Vec::new(),
        })
    }

    fn epoch(&mut self, windows: &[Vec<usize>], schedule: &[Vec<usize>], cap: usize) -> Result<()> {
        let started = Instant::now();
        let mut hashes = Vec::new();
        let mut loss_sum = 0.0;
        let steps = if cap == 0 {
            schedule.len()
        } else {
            cap.min(schedule.len())
        };
        for idx in &schedule[..steps] {
            let refs: Vec<&Vec<usize>> = idx.iter().map(|&i| &windows[i]).collect();
            hashes.push(batch_hash(&refs));
            let batch: Vec<Vec<usize>> = refs.into_iter().cloned().collect();
            loss_sum += train_step(&mut self.params, &self.cfg, &batch, &mut self.state)?;
        }
        self.report
            .epoch_seconds
            .push(started.elapsed().as_secs_f64());
        self.report.epoch_loss.push(loss_sum / steps.max(1) as f64);
        self.hashes.push(hashes);
        Ok(())
    }

    fn evaluate(&mut self, run: &RunConfig, datasets: &[Dataset]) -> Result<()> {
        let m = &run.metrics;
        let max_seq = self.cfg.max_seq;
        let mut seqs: Vec<&[usize]> = Vec::new();
        for d in datasets {
            seqs.extend(
                d.held_out
                    .chunks(max_seq)
                    .filter(|c| c.len() >= 2)
                    .take(m.eval_sequences),
            );
        }
        let layers = layer_metrics(&self.params, &self.cfg, &seqs, m.tau, m.eps)?;
        self.report.epoch_layers.push(layers.clone());
        self.report.layers = layers;
        for d in datasets {
            let ppl = perplexity(
                &self.params,
                &self.cfg,
                &d.held_out,
                run.perplexity_stride(),
            )?;
            self.report.perplexity.insert(d.category.clone(), ppl);
        }
        self.report.gates = if self.cfg.fold_enabled {
            self.params.layers.iter().map(|l| l.fold.gate).collect()
        } else {
            Vec::new()
        };
        Ok(())
    }

    fn continuation(&self, prompt: &[usize], new: usize) -> Result<Vec<usize>> {
        let full = generate(&self.params, &self.cfg, prompt, new, &Decoding::Greedy)?;
        Ok(full[prompt.len()..].to_vec())
    }
}

/// Prompt and reference continuation pairs spread evenly over a held-out split.
fn reorder_prompts(
    d: &Dataset,
    count: usize,
    prompt: usize,
    new: usize,
) -> Vec<(&[usize], &[usize])> {
    let span = prompt + new;
    if count == 0 || d.held_out.len() < span {
        return Vec::new();
    }
    let room = d.held_out.len() - span;
    (0..count)
        .map(|k| {
            let start = if count == 1 {
                0
            } else {
                room * k / (count - 1)
            };
            let s = &d.held_out[start..start + span];
            (&s[..prompt], &s[prompt..])
        })
        .collect()
}

fn measure_reordering(
    run: &RunConfig,
    datasets: &[Dataset],
    baseline: &mut ModelRun,
    folding: &mut ModelRun,
) -> Result<BTreeMap<String, f64>> {
    let m = &run.metrics;
    let mut cross = BTreeMap::new();
    for d in datasets {
        let prompts = reorder_prompts(
            d,
            m.reorder_prompts_per_category,
            m.reorder_prompt_len,
            m.reorder_new_tokens,
        );
        if prompts.is_empty() {
            continue;
        }
        let (mut b_ref, mut f_ref, mut b_f) = (0.0, 0.0, 0.0);
        for (prompt, reference) in &prompts {
            let b = baseline.continuation(prompt, m.reorder_new_tokens)?;
            let f = folding.continuation(prompt, m.reorder_new_tokens)?;
            b_ref += token_reordering_frequency(&b, reference)?;
            f_ref += token_reordering_frequency(&f, reference)?;
            b_f += token_reordering_frequency(&b, &f)?;
        }
        let k = prompts.len() as f64;
        baseline
            .report
            .reordering
            .insert(d.category.clone(), b_ref / k);
        folding
            .report
            .reordering
            .insert(d.category.clone(), f_ref / k);
        cross.insert(d.category.clone(), b_f / k);
    }
    for (i, text) in m.reorder_prompts.iter().enumerate() {
        let prompt = tokenize(text.as_bytes());
        if prompt.is_empty() || prompt.len() + m.reorder_new_tokens > run.model.max_seq {
            return Err(Error::Config(format!(
                "reorder prompt {i} must hold 1 to {} bytes",
                run.model.max_seq - m.reorder_new_tokens
            )));
        }
        let b = baseline.continuation(&prompt, m.reorder_new_tokens)?;
        let f = folding.continuation(&prompt, m.reorder_new_tokens)?;
        cross.insert(format!("prompt:{i}"), token_reordering_frequency(&b, &f)?);
    }
    Ok(cross)
}

fn init_logit_gap(baseline: &ModelRun, folding: &ModelRun, datasets: &[Dataset]) -> Result<f64> {
    let mut gap: f64 = 0.0;
    for d in datasets {
        let n = d.held_out.len().min(baseline.cfg.max_seq);
        if n == 0 {
            continue;
        }
        let tokens = &d.held_out[..n];
        let a = logits(&baseline.params, &baseline.cfg, tokens)?;
        let b = logits(&folding.params, &folding.cfg, tokens)?;
        gap = gap.max(a.max_abs_diff(&b));
    }
    Ok(gap)
}

/// Trains the baseline (folding disabled) and the folding model from the same seed on the
/// same batch sequence, epochs interleaved, measuring everything after each epoch. A
/// training error stops both runs and marks the result partial.
pub fn run_comparison(run: &RunConfig) -> Result<ComparisonResult> {
    let (datasets, windows) = data_for(run)?;
    let model_cfg = ModelConfig {
        seed: run.training.seed,
        ..run.model.clone()
    };
    let mut baseline = ModelRun::new(
        ModelConfig {
            fold_enabled: false,
            ..model_cfg.clone()
        },
        run,
    )?;
    let mut folding = ModelRun::new(
        ModelConfig {
            fold_enabled: true,
            ..model_cfg
        },
        run,
    )?;
    let init_gap = init_logit_gap(&baseline, &folding, &datasets)?;

    let mut error: Option<String> = None;
    for epoch in 0..run.training.epochs {
        let schedule = batch_schedule(
            windows.len(),
            run.training.batch_size,
            run.training.seed,
            epoch,
        );
        let cap = run.training.max_steps_per_epoch;
        let outcome = baseline
            .epoch(&windows, &schedule, cap)
            .map_err(|e| format!("baseline: {e}"))
            .and_then(|()| {
                folding
                    .epoch(&windows, &schedule, cap)
                    .map_err(|e| format!("folding: {e}"))
            })
            .and_then(|()| {
                baseline
                    .evaluate(run, &datasets)
                    .map_err(|e| format!("baseline evaluation: {e}"))
            })
            .and_then(|()| {
                folding
                    .evaluate(run, &datasets)
                    .map_err(|e| format!("folding evaluation: {e}"))
            });
        if let Err(e) = outcome {
            error = Some(format!("epoch {epoch}: {e}"));
            break;
        }
    }
    let mut finish = || -> Result<BTreeMap<String, f64>> {
        if baseline.report.epoch_layers.is_empty() {
            baseline.evaluate(run, &datasets)?;
            folding.evaluate(run, &datasets)?;
        }
        measure_reordering(run, &datasets, &mut baseline, &mut folding)
    };
    let cross_reordering = match (finish(), error.as_mut()) {
        (Ok(cross), _) => cross,
        (Err(e), None) => return Err(e),
        (Err(e), Some(msg)) => {
            msg.push_str(&format!("; final evaluation skipped: {e}"));
            BTreeMap::new()
        }
    };

    let digest = |hashes: &[Vec<[u8; 32]>]| -> Vec<String> {
        hashes
            .iter()
            .map(|epoch| {
                let mut h = Sha256::new();
                epoch.iter().for_each(|b| h.update(b));
                hex(&h.finalize())
            })
            .collect()
    };
    let batches_match = baseline.hashes == folding.hashes;
    Ok(ComparisonResult {
        batch_digests: digest(&baseline.hashes),
        batches_match,
        init_logit_max_abs_diff: init_gap,
        cross_reordering,
        partial: error.is_some(),
        error,
        ablation: run.ablation.map(|a| a.name().to_string()),
        baseline: baseline.report,
        folding: folding.report,
    })
}

/// One trained model and its report.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub report: MetricsReport,
}

fn data_for(run: &RunConfig) -> Result<(Vec<Dataset>, Vec<Vec<usize>>)> {
    run.validate()?;
    let datasets = load_corpus(&run.data)?;
    let windows = training_windows(&datasets, run.training.window);
    if windows.is_empty() && run.training.epochs > 0 {
        return Err(Error::Config(format!(
            "corpus too short for a single window of {} tokens",
            run.training.window + 1
        )));
    }
    Ok((datasets, windows))
}

/// Trains a single model (folding or baseline) with the same schedule the comparison uses.
pub fn train_model(run: &RunConfig, fold_enabled: bool) -> Result<TrainedModel> {
    let (datasets, windows) = data_for(run)?;
    let cfg = ModelConfig {
        seed: run.training.seed,
        fold_enabled,
        ..run.model.clone()
    };
    let mut m = ModelRun::new(cfg, run)?;
    for epoch in 0..run.training.epochs {
        let schedule = batch_schedule(
            windows.len(),
            run.training.batch_size,
            run.training.seed,
            epoch,
        );
        m.epoch(&windows, &schedule, run.training.max_steps_per_epoch)?;
        m.evaluate(run, &datasets)?;
    }
    if m.report.epoch_layers.is_empty() {
        m.evaluate(run, &datasets)?;
    }
    Ok(TrainedModel {
        cfg: m.cfg,
        params: m.params,
        report: m.report,
    })
}

/// Layer metrics and held-out perplexity of an existing model on the run's corpora.
pub fn evaluate_model(
    params: &Parameters,
    cfg: &ModelConfig,
    run: &RunConfig,
) -> Result<MetricsReport> {
    let datasets = load_corpus(&run.data)?;
    let mut m = ModelRun::new(cfg.clone(), run)?;
    m.params = params.clone();
    m.evaluate(run, &datasets)?;
    Ok(m.report)
}
