use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::folding::{assign_clusters, update_centers};
use crate::math::Mat;
use crate::model::config::ModelConfig;
use crate::model::forward::build_graph;
use crate::model::params::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam moments, the step counter, and the activations held for center refreshes.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub adam: AdamConfig,
    pub step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    center_buffer: Vec<Option<Mat>>,
}

impl OptimizerState {
    pub fn new(params: &Parameters, adam: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.flat_tensors().iter().map(Vec::len).collect();
        OptimizerState {
            adam,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            center_buffer: vec![None; params.layers.len()],
        }
    }
}

/// Mean loss over a batch and its gradient for every parameter tensor, in canonical order.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Mat>,
    /// Per layer: affine-transformed folding inputs from every sequence in the batch.
    pub fold_inputs: Vec<Option<Mat>>,
}

/// Splits a window into inputs and next-token targets.
pub fn split_window(window: &[usize]) -> Result<(&[usize], &[usize])> {
    if window.len() < 2 {
        return Err(Error::Config(format!(
            "training windows need at least 2 tokens, got {}",
            window.len()
        )));
    }
    Ok((&window[..window.len() - 1], &window[1..]))
}

pub fn loss_and_grads(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let specs = params.specs();
    let mut grads: Vec<Mat> = specs.iter().map(|s| Mat::zeros(s.rows, s.cols)).collect();
    let mut fold_parts: Vec<Vec<Mat>> = vec![Vec::new(); params.layers.len()];
    let mut total = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for window in batch {
        let (inputs, targets) = split_window(window)?;
        let mut tape = Tape::new();
        let graph = build_graph(&mut tape, params, cfg, inputs, false)?;
        let loss = tape.cross_entropy(graph.logits, targets);
        total += tape.value(loss).get(0, 0);
        let mut g = tape.backward(loss);
        for (acc, var) in grads.iter_mut().zip(&graph.param_vars) {
            if let Some(gm) = g.take(*var) {
                acc.axpy(weight, &gm)?;
            }
        }
        for (parts, x) in fold_parts.iter_mut().zip(graph.fold_inputs) {
            if let Some(x) = x {
                parts.push(x);
            }
        }
    }
    let fold_inputs = fold_parts
        .iter()
        .map(|parts| {
            if parts.is_empty() {
                Ok(None)
            } else {
                Mat::vstack(&parts.iter().collect::<Vec<_>>()).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(BatchGradients {
        loss: total * weight,
        grads,
        fold_inputs,
    })
}

/// One optimization step on a batch of token windows (each window holds inputs plus the
/// final target). Returns the batch loss before the update. On error the parameters and
/// optimizer state are left as they were.
pub fn train_step(
    params: &mut Parameters,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
    state: &mut OptimizerState,
) -> Result<f64> {
    let (saved_params, saved_state) = (params.clone(), state.clone());
    let outcome = apply_step(params, cfg, batch, state);
    if outcome.is_err() {
        *params = saved_params;
        *state = saved_state;
    }
    outcome
}

fn apply_step(
    params: &mut Parameters,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
    state: &mut OptimizerState,
) -> Result<f64> {
    let step = state.step;
    let fail = |detail: String| Error::Training { step, detail };
    let mut bg = loss_and_grads(params, cfg, batch).map_err(|e| match e {
        Error::Numerical { stage } => fail(format!("non-finite value at {stage}")),
        other => other,
    })?;
    if !bg.loss.is_finite() {
        return Err(fail(format!("loss is {}", bg.loss)));
    }
    if bg.grads.iter().any(|g| !g.is_finite()) {
        return Err(fail("non-finite gradient".into()));
    }
    let gate_frozen = cfg.fixed_gate.is_some();

    let adam = state.adam.clone();
    let norm = bg.grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
    let clip = if adam.clip_norm > 0.0 && norm > adam.clip_norm {
        adam.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    let mut idx = 0;
    let (first, second) = (&mut state.first, &mut state.second);
    params.visit_mut(|name, _, data| {
        let frozen = gate_frozen && name.ends_with("fold.gate");
        let g = bg.grads[idx].data();
        let (m, v) = (&mut first[idx], &mut second[idx]);
        idx += 1;
        if adam.lr == 0.0 || frozen {
            return;
        }
        for (((p, &gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * clip;
            *mi = adam.beta1 * *mi + (1.0 - adam.beta1) * gi;
            *vi = adam.beta2 * *vi + (1.0 - adam.beta2) * gi * gi;
            *p -= adam.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + adam.eps);
        }
    });
    for layer in &mut params.layers {
        layer.fold.gate = layer.fold.gate.clamp(0.0, 1.0);
    }

    for (slot, x) in state
        .center_buffer
        .iter_mut()
        .zip(bg.fold_inputs.iter_mut())
    {
        if let Some(x) = x.take() {
            *slot = Some(x);
        }
    }
    if cfg.fold_enabled && cfg.center_refresh > 0 && step.is_multiple_of(cfg.center_refresh) {
        refresh_centers(params, state)?;
    }
    if !params.is_finite() {
        return Err(fail("non-finite parameter after update".into()));
    }
    Ok(bg.loss)
}

/// k-means style refresh: reassign the buffered activations and move every center to the
/// mean of its members (empty clusters keep their center).
fn refresh_centers(params: &mut Parameters, state: &OptimizerState) -> Result<()> {
    for (layer, buffer) in params.layers.iter_mut().zip(&state.center_buffer) {
        if let Some(x) = buffer {
            let assignment = assign_clusters(x, &layer.fold.centers)?;
            let k = layer.fold.centers.rows();
            layer.fold.centers = update_centers(x, &assignment, k, &layer.fold.centers)?;
        }
    }
    Ok(())
}
