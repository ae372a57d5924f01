use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::folding::{fold_step_in, nearest_centers, FoldingConfig};
use crate::math::{Mat, Neighbourhood};
use crate::model::config::ModelConfig;
use crate::model::params::{LayerParams, Parameters};

/// Sinusoidal position signal is added at this scale, matching the embedding init.
const POSITION_SCALE: f64 = 0.1;

/// Everything the metrics need from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Residual stream after each layer (after folding, where folding runs).
    pub residual: Vec<Mat>,
    /// `[layer][head]`, each `seq x seq`, causal.
    pub attention: Vec<Vec<Mat>>,
    /// `[layer]`, `seq x heads`: norm of each head's contribution to the residual stream.
    pub head_norms: Vec<Mat>,
    /// `[layer]`, `seq x d_ff`: feed-forward values after the rectifier.
    pub ff_activations: Vec<Mat>,
    pub logits: Mat,
}

pub(crate) struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    ff_in: Var,
    ff_in_bias: Var,
    ff_out: Var,
    ff_out_bias: Var,
    fold_transform: Var,
    fold_bias: Var,
    fold_centers: Var,
    fold_gate: Var,
    fold_norm_gain: Var,
    fold_norm_bias: Var,
}

impl LayerVars {
    fn ordered(&self) -> [Var; 18] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gain,
            self.ln2_bias,
            self.ff_in,
            self.ff_in_bias,
            self.ff_out,
            self.ff_out_bias,
            self.fold_transform,
            self.fold_bias,
            self.fold_centers,
            self.fold_gate,
            self.fold_norm_gain,
            self.fold_norm_bias,
        ]
    }
}

pub(crate) struct Graph {
    pub logits: Var,
    pub param_vars: Vec<Var>,
    /// Affine-transformed stream entering each folding module (None where no folding).
    pub fold_inputs: Vec<Option<Mat>>,
    pub trace: Option<ForwardTrace>,
}

fn layer_vars<'a>(tape: &mut Tape<'a>, p: &'a LayerParams) -> LayerVars {
    LayerVars {
        ln1_gain: tape.param(&p.ln1_gain),
        ln1_bias: tape.param(&p.ln1_bias),
        wq: tape.param(&p.wq),
        wk: tape.param(&p.wk),
        wv: tape.param(&p.wv),
        wo: tape.param(&p.wo),
        ln2_gain: tape.param(&p.ln2_gain),
        ln2_bias: tape.param(&p.ln2_bias),
        ff_in: tape.param(&p.ff_in),
        ff_in_bias: tape.param(&p.ff_in_bias),
        ff_out: tape.param(&p.ff_out),
        ff_out_bias: tape.param(&p.ff_out_bias),
        fold_transform: tape.param(&p.fold.transform),
        fold_bias: tape.param_owned(Mat::row_vector(&p.fold.bias)),
        fold_centers: tape.param(&p.fold.centers),
        fold_gate: tape.param_owned(Mat::filled(1, 1, p.fold.gate)),
        fold_norm_gain: tape.param(&p.fold_norm_gain),
        fold_norm_bias: tape.param(&p.fold_norm_bias),
    }
}

pub fn positional_encoding(n: usize, d: usize) -> Mat {
    Mat::from_fn(n, d, |pos, j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        POSITION_SCALE * if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Decode(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn norm_affine(tape: &mut Tape<'_>, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm(x);
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

/// Folding module on the tape. Returns the new residual stream and the affine output that
/// feeds the center refresh buffer.
fn fold_module(tape: &mut Tape<'_>, x: Var, v: &LayerVars, cfg: &FoldingConfig) -> (Var, Mat) {
    let mut cur = tape.matmul_t(x, v.fold_transform);
    cur = tape.add_row(cur, v.fold_bias);
    if cfg.lambda > 0.0 {
        let lap = tape.laplacian(x, Neighbourhood::Preceding);
        let pert = tape.scale(lap, cfg.lambda);
        cur = tape.add(cur, pert);
    }
    let transformed = tape.value(cur).clone();
    let diffusion = 4.0 * cfg.gamma + cfg.beta;
    let weights = (-2.0 * cfg.alpha * cfg.eta, diffusion * cfg.eta);
    if weights != (0.0, 0.0) {
        for _ in 0..cfg.inner_steps {
            let assignment = if weights.0 != 0.0 {
                nearest_centers(tape.value(cur), tape.value(v.fold_centers))
            } else {
                vec![0; tape.value(cur).rows()]
            };
            cur = tape.fold_adjust(
                cur,
                v.fold_centers,
                &assignment,
                weights,
                Neighbourhood::Preceding,
            );
        }
    }
    let unit = tape.row_normalize(cur);
    let normed = norm_affine(tape, unit, v.fold_norm_gain, v.fold_norm_bias);
    (tape.gate_mix(x, normed, v.fold_gate), transformed)
}

pub(crate) fn build_graph<'a>(
    tape: &mut Tape<'a>,
    params: &'a Parameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    capture: bool,
) -> Result<Graph> {
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let embedding = tape.param(&params.embedding);
    let layer_vars: Vec<LayerVars> = params.layers.iter().map(|p| layer_vars(tape, p)).collect();
    let final_gain = tape.param(&params.final_gain);
    let final_bias = tape.param(&params.final_bias);

    let tok = tape.gather_rows(embedding, tokens);
    let pos = tape.constant(positional_encoding(n, d));
    let mut x = tape.add(tok, pos);

    let mut trace = capture.then(|| ForwardTrace {
        residual: Vec::with_capacity(cfg.n_layers),
        attention: Vec::with_capacity(cfg.n_layers),
        head_norms: Vec::with_capacity(cfg.n_layers),
        ff_activations: Vec::with_capacity(cfg.n_layers),
        logits: Mat::zeros(0, 0),
    });
    let mut fold_inputs = Vec::with_capacity(cfg.n_layers);

    for (l, v) in layer_vars.iter().enumerate() {
        let h = norm_affine(tape, x, v.ln1_gain, v.ln1_bias);
        let q = tape.matmul(h, v.wq);
        let k = tape.matmul(h, v.wk);
        let val = tape.matmul(h, v.wv);
        let mut head_outs = Vec::with_capacity(heads);
        let mut weights = Vec::new();
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(val, hd * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let probs = tape.causal_softmax(scores, attn_scale);
            if capture {
                weights.push(tape.value(probs).clone());
            }
            head_outs.push(tape.matmul(probs, vh));
        }
        let concat = tape.concat_cols(&head_outs);
        let attn = tape.matmul(concat, v.wo);
        if let Some(t) = trace.as_mut() {
            let wo = &params.layers[l].wo;
            let mut norms = Mat::zeros(n, heads);
            for (hd, out) in head_outs.iter().enumerate() {
                let slab = wo.row_slice(hd * dh, dh);
                let contrib = tape.value(*out).matmul(&slab)?;
                for i in 0..n {
                    norms.set(
                        i,
                        hd,
                        contrib.row(i).iter().map(|c| c * c).sum::<f64>().sqrt(),
                    );
                }
            }
            t.attention.push(weights);
            t.head_norms.push(norms);
        }
        x = tape.add(x, attn);

        let h2 = norm_affine(tape, x, v.ln2_gain, v.ln2_bias);
        let pre = tape.matmul(h2, v.ff_in);
        let pre = tape.add_row(pre, v.ff_in_bias);
        let act = tape.relu(pre);
        if let Some(t) = trace.as_mut() {
            t.ff_activations.push(tape.value(act).clone());
        }
        let ff = tape.matmul(act, v.ff_out);
        let ff = tape.add_row(ff, v.ff_out_bias);
        x = tape.add(x, ff);

        if cfg.folds_at(l) {
            let (folded, transformed) = fold_module(tape, x, v, &cfg.folding);
            x = folded;
            fold_inputs.push(Some(transformed));
        } else {
            fold_inputs.push(None);
        }
        if let Some(t) = trace.as_mut() {
            t.residual.push(tape.value(x).clone());
        }
    }

    let h = norm_affine(tape, x, final_gain, final_bias);
    let logits = tape.matmul_t(h, embedding);
    if !tape.value(logits).is_finite() {
        return Err(Error::Numerical { stage: "logits" });
    }
    if let Some(t) = trace.as_mut() {
        t.logits = tape.value(logits).clone();
    }

    let mut param_vars = vec![embedding];
    for v in &layer_vars {
        param_vars.extend(v.ordered());
    }
    param_vars.push(final_gain);
    param_vars.push(final_bias);
    Ok(Graph {
        logits,
        param_vars,
        fold_inputs,
        trace,
    })
}

/// Runs the model on one sequence and records a full trace.
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<(Mat, ForwardTrace)> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, params, cfg, tokens, true)?;
    let trace = graph.trace.expect("capture requested");
    Ok((trace.logits.clone(), trace))
}

/// Logits only, without the trace.
pub fn logits(params: &Parameters, cfg: &ModelConfig, tokens: &[usize]) -> Result<Mat> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, params, cfg, tokens, false)?;
    Ok(tape.value(graph.logits).clone())
}

/// Mean next-token negative log-likelihood in nats. Row `i` of `logits` predicts
/// `targets[i]`.
pub fn loss(logits: &Mat, targets: &[usize]) -> Result<f64> {
    Ok(nll_sum(logits, targets)? / targets.len().max(1) as f64)
}

pub(crate) fn nll_sum(logits: &Mat, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "loss",
            format!("{} logit rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (row, &t) in logits.row_iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::shape(
                "loss",
                format!("target {t} outside {} logits", row.len()),
            ));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total)
}

/// Row standardization followed by a per-feature scale and shift.
pub fn layer_norm_rows(x: &Mat, gain: &Mat, bias: &Mat) -> Mat {
    let d = x.cols();
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.row(0)).zip(bias.row(0)) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// Gated folding module on a residual stream, computed without the tape:
/// `X + s (post_norm(fold_step(X)) - X)`. The affinity graph only links each position to
/// earlier ones, so the module stays causal.
pub fn folding_module_apply(x: &Mat, layer: &LayerParams, cfg: &FoldingConfig) -> Result<Mat> {
    let folded = fold_step_in(x, &layer.fold, cfg, Neighbourhood::Preceding)?;
    let normed = layer_norm_rows(&folded, &layer.fold_norm_gain, &layer.fold_norm_bias);
    let s = layer.fold.gate;
    let mut out = x.clone();
    for (o, z) in out.data_mut().iter_mut().zip(normed.data()) {
        *o += s * (z - *o);
    }
    if !out.is_finite() {
        return Err(Error::Numerical {
            stage: "folding_module",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::numdiff::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
    use crate::math::RngState;
    use crate::model::train::loss_and_grads;

    fn micro(layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: layers,
            n_heads: 2,
            d_ff: 16,
            max_seq: 8,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    /// Moves every tensor off its structured init so no gradient is trivially zero.
    fn jitter(p: &mut Parameters, seed: u64, gate: f64) {
        let mut rng = RngState::new(seed);
        p.visit_mut(|_, _, data| data.iter_mut().for_each(|v| *v += 0.05 * rng.gaussian()));
        for layer in &mut p.layers {
            layer.fold.gate = gate;
        }
    }

    fn window_loss(p: &Parameters, cfg: &ModelConfig, window: &[usize]) -> f64 {
        let z = logits(p, cfg, &window[..window.len() - 1]).unwrap();
        loss(&z, &window[1..]).unwrap()
    }

    #[test]
    fn gated_identity_at_init() {
        for seed in [0, 1, 7] {
            let cfg = ModelConfig { seed, ..micro(2) };
            let base_cfg = ModelConfig {
                fold_enabled: false,
                ..cfg.clone()
            };
            let p = Parameters::init(&cfg).unwrap();
            let tokens = [72, 101, 108, 108, 111, 33];
            let a = logits(&p, &cfg, &tokens).unwrap();
            let b = logits(&p, &base_cfg, &tokens).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn module_is_identity_at_init_and_matches_open_gate() {
        let cfg = micro(1);
        let p = Parameters::init(&cfg).unwrap();
        let x = RngState::new(2).gaussian_mat(5, 8);
        let layer = &p.layers[0];
        assert_eq!(folding_module_apply(&x, layer, &cfg.folding).unwrap(), x);

        let mut open = layer.clone();
        open.fold.gate = 1.0;
        let expected = layer_norm_rows(
            &fold_step_in(&x, &open.fold, &cfg.folding, Neighbourhood::Preceding).unwrap(),
            &open.fold_norm_gain,
            &open.fold_norm_bias,
        );
        let got = folding_module_apply(&x, &open, &cfg.folding).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn tape_module_matches_reference() {
        for lambda in [0.0, 0.2] {
            let mut cfg = micro(1);
            cfg.folding.lambda = lambda;
            cfg.folding.inner_steps = 2;
            let mut p = Parameters::init(&cfg).unwrap();
            jitter(&mut p, 4, 0.6);
            let x = RngState::new(9).gaussian_mat(6, 8).scale(0.5);
            let expected = folding_module_apply(&x, &p.layers[0], &cfg.folding).unwrap();
            let mut tape = Tape::new();
            let v = layer_vars(&mut tape, &p.layers[0]);
            let xv = tape.constant(x.clone());
            let (out, _) = fold_module(&mut tape, xv, &v, &cfg.folding);
            assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn causality_is_exact() {
        let cfg = micro(2);
        let mut p = Parameters::init(&cfg).unwrap();
        jitter(&mut p, 3, 0.5);
        let a = [5, 9, 200, 31, 77, 4];
        let base = logits(&p, &cfg, &a).unwrap();
        for t in 0..a.len() {
            let mut b = a;
            b[t] = (b[t] + 101) % 256;
            let other = logits(&p, &cfg, &b).unwrap();
            for i in 0..t {
                assert_eq!(base.row(i), other.row(i), "position {i} saw token {t}");
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let cfg = micro(2);
        let mut p = Parameters::init(&cfg).unwrap();
        jitter(&mut p, 8, 0.3);
        let (_, trace) = forward(&p, &cfg, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(trace.attention.len(), 2);
        for layer in &trace.attention {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for i in 0..a.rows() {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(a.row(i)[i + 1..].iter().all(|&w| w == 0.0));
                }
            }
        }
        assert_eq!(trace.residual[1].shape(), (7, 8));
        assert_eq!(trace.ff_activations[0].shape(), (7, 16));
        assert_eq!(trace.head_norms[0].shape(), (7, 2));
    }

    #[test]
    fn zero_parameters_give_uniform_logits() {
        let cfg = micro(1);
        let mut p = Parameters::init(&cfg).unwrap();
        p.visit_mut(|_, _, data| data.iter_mut().for_each(|v| *v = 0.0));
        let z = logits(&p, &cfg, &[3, 1, 4]).unwrap();
        for row in z.row_iter() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        assert!((loss(&z, &[1, 4, 1]).unwrap() - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let uniform = Mat::zeros(3, 256);
        assert!((loss(&uniform, &[0, 5, 255]).unwrap() - 5.545177).abs() < 1e-6);
        let mut sharp = Mat::zeros(2, 4);
        sharp.set(0, 1, 100.0);
        sharp.set(1, 3, 100.0);
        assert!(loss(&sharp, &[1, 3]).unwrap() < 1e-40);

        let z = Mat::from_rows(&[
            [0.5, -1.0, 2.0],
            [1.5, 0.0, 0.25],
            [-0.5, 3.0, 1.0],
            [0.0, 0.0, 0.1],
        ]);
        let targets = [2, 0, 1, 1];
        let mut brute = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let denom: f64 = z.row(i).iter().map(|v| v.exp()).sum();
            brute -= (z.get(i, t).exp() / denom).ln();
        }
        assert!((loss(&z, &targets).unwrap() - brute / 4.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let cfg = micro(1);
        let p = Parameters::init(&cfg).unwrap();
        assert!(matches!(
            logits(&p, &cfg, &[1; 9]),
            Err(Error::Length { len: 9, max: 8 })
        ));
        assert!(matches!(logits(&p, &cfg, &[]), Err(Error::Config(_))));
        assert!(matches!(logits(&p, &cfg, &[300]), Err(Error::Decode(_))));
    }

    fn gradient_check(cfg: &ModelConfig, seed: u64) {
        let mut p = Parameters::init(cfg).unwrap();
        jitter(&mut p, seed, 0.5);
        let window = vec![10, 200, 33, 10, 64];
        let analytic = loss_and_grads(&p, cfg, std::slice::from_ref(&window)).unwrap();
        let specs = p.specs();
        for (idx, spec) in specs.iter().enumerate() {
            let current =
                Mat::from_vec(spec.rows, spec.cols, p.flat_tensors()[idx].clone()).unwrap();
            let numeric = finite_diff_grad(
                |m| {
                    let mut q = p.clone();
                    let mut k = 0;
                    q.visit_mut(|_, _, data| {
                        if k == idx {
                            data.copy_from_slice(m.data());
                        }
                        k += 1;
                    });
                    window_loss(&q, cfg, &window)
                },
                &current,
                DEFAULT_STEP,
            )
            .unwrap();
            let err = max_relative_error(&analytic.grads[idx], &numeric, 1e-8);
            assert!(err < 1e-3, "{}: relative error {err}", spec.name);
        }
    }

    #[test]
    fn full_gradient_check_micro_model() {
        gradient_check(&micro(1), 21);
    }

    #[test]
    fn full_gradient_check_with_perturbation_and_inner_steps() {
        let mut cfg = micro(1);
        cfg.folding.lambda = 0.1;
        cfg.folding.inner_steps = 2;
        gradient_check(&cfg, 22);
    }

    #[test]
    fn gate_gradient_two_layer_toy() {
        let cfg = micro(2);
        let mut p = Parameters::init(&cfg).unwrap();
        jitter(&mut p, 5, 0.25);
        let window = vec![1, 50, 99, 7, 7, 120];
        let g = loss_and_grads(&p, &cfg, std::slice::from_ref(&window)).unwrap();
        let specs = p.specs();
        for l in 0..2 {
            let idx = specs
                .iter()
                .position(|s| s.name == format!("layers.{l}.fold.gate"))
                .unwrap();
            let numeric = finite_diff_grad(
                |m| {
                    let mut q = p.clone();
                    q.layers[l].fold.gate = m.get(0, 0);
                    window_loss(&q, &cfg, &window)
                },
                &Mat::filled(1, 1, p.layers[l].fold.gate),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(max_relative_error(&g.grads[idx], &numeric, 1e-8) < 1e-3);
        }
    }
}
