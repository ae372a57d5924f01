//! Measurements taken from forward traces and trained models: representation variance,
//! attention-head utilization, activation sparsity, perplexity, token reordering and
//! training-time overhead.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::model::forward::{forward, logits, nll_sum, ForwardTrace};
use crate::model::{ModelConfig, Parameters};

/// Default share threshold for counting a head as active.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default near-zero band for activation sparsity.
pub const DEFAULT_SPARSITY_EPS: f64 = 1e-3;

fn layer_of<'a, T>(items: &'a [T], layer: usize, what: &str) -> Result<&'a T> {
    items.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "{what}: layer {layer} outside trace with {} layers",
            items.len()
        ))
    })
}

/// Mean squared distance of the rows to their centroid, divided by `d`:
/// `(1 / (n d)) sum_i |x_i - mean|^2`.
pub fn representation_variance(x: &Mat) -> Result<f64> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "variance needs at least 2 tokens, got {n}"
        )));
    }
    let mean = x.column_means();
    let total: f64 = x
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    Ok(total / (n * d) as f64)
}

pub fn intra_layer_variance(trace: &ForwardTrace, layer: usize) -> Result<f64> {
    representation_variance(layer_of(&trace.residual, layer, "intra_layer_variance")?)
}

/// Percentage of heads whose mean per-token output-norm share is at least `tau / H`.
/// `norms` is `tokens x heads`; tokens where every head is silent are skipped.
pub fn head_utilization_from_norms(norms: &Mat, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let heads = norms.cols();
    if heads == 0 {
        return Err(Error::UndefinedMetric("no attention heads".into()));
    }
    let mut share = vec![0.0; heads];
    let mut counted = 0usize;
    for row in norms.row_iter() {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            continue;
        }
        counted += 1;
        for (s, v) in share.iter_mut().zip(row) {
            *s += v / total;
        }
    }
    if counted == 0 {
        return Ok(0.0);
    }
    let bar = tau / heads as f64;
    let active = share.iter().filter(|&&s| s / counted as f64 >= bar).count();
    Ok(100.0 * active as f64 / heads as f64)
}

pub fn attention_head_utilization(trace: &ForwardTrace, layer: usize, tau: f64) -> Result<f64> {
    head_utilization_from_norms(
        layer_of(&trace.head_norms, layer, "attention_head_utilization")?,
        tau,
    )
}

/// Fraction of entries with `|a| < eps`.
pub fn sparsity_of(values: &[f64], eps: f64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "sparsity eps must be positive, got {eps}"
        )));
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric("no activations".into()));
    }
    let near_zero = values.iter().filter(|v| v.abs() < eps).count();
    Ok(near_zero as f64 / values.len() as f64)
}

pub fn activation_sparsity(trace: &ForwardTrace, layer: usize, eps: f64) -> Result<f64> {
    sparsity_of(
        layer_of(&trace.ff_activations, layer, "activation_sparsity")?.data(),
        eps,
    )
}

/// Evaluation windows over a token stream: each window starts `stride` after the previous
/// one and holds up to `max_seq` inputs plus their shifted targets.
pub fn eval_windows(tokens: &[usize], max_seq: usize, stride: usize) -> Result<Vec<&[usize]>> {
    if tokens.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if stride == 0 || max_seq == 0 {
        return Err(Error::Config(
            "window length and stride must be positive".into(),
        ));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + max_seq + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start += stride;
    }
    Ok(out)
}

/// Token-weighted mean next-token NLL (nats) over [`eval_windows`].
pub fn mean_nll(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    stride: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in eval_windows(tokens, cfg.max_seq, stride)? {
        let z = logits(params, cfg, &w[..w.len() - 1])?;
        total += nll_sum(&z, &w[1..])?;
        count += w.len() - 1;
    }
    Ok(total / count as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    stride: usize,
) -> Result<f64> {
    Ok(mean_nll(params, cfg, tokens, stride)?.exp())
}

/// Positions of equal tokens matched by occurrence index: the k-th occurrence of a token
/// in `a` pairs with its k-th occurrence in `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReorderPairing {
    /// `(position in a, position in b)`, sorted by position in `a`.
    pub pairs: Vec<(usize, usize)>,
}

impl ReorderPairing {
    pub fn new(a: &[usize], b: &[usize]) -> Self {
        let mut seen_b: HashMap<usize, Vec<usize>> = HashMap::new();
        for (j, &t) in b.iter().enumerate() {
            seen_b.entry(t).or_default().push(j);
        }
        let mut used: HashMap<usize, usize> = HashMap::new();
        let mut pairs = Vec::new();
        for (i, &t) in a.iter().enumerate() {
            let k = used.entry(t).or_insert(0);
            if let Some(&j) = seen_b.get(&t).and_then(|js| js.get(*k)) {
                pairs.push((i, j));
            }
            *k += 1;
        }
        ReorderPairing { pairs }
    }

    /// Number of matched pairs whose relative order differs between the sequences.
    pub fn inversions(&self) -> u64 {
        let mut order: Vec<usize> = self.pairs.iter().map(|&(_, j)| j).collect();
        count_inversions(&mut order)
    }
}

fn count_inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            count += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}

/// Percentage of matched token pairs whose relative order differs between `a` and `b`;
/// 0 when fewer than two tokens match.
pub fn token_reordering_frequency(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "reordering needs two nonempty sequences".into(),
        ));
    }
    let pairing = ReorderPairing::new(a, b);
    let m = pairing.pairs.len() as u64;
    if m < 2 {
        return Ok(0.0);
    }
    let total = m * (m - 1) / 2;
    Ok(100.0 * pairing.inversions() as f64 / total as f64)
}

/// `100 (mean folding - mean baseline) / mean baseline`.
pub fn training_overhead(baseline: &[f64], folding: &[f64]) -> Result<f64> {
    if baseline.is_empty() || baseline.len() != folding.len() {
        return Err(Error::Config(format!(
            "overhead needs equal, nonzero epoch counts, got {} and {}",
            baseline.len(),
            folding.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = mean(baseline);
    if base == 0.0 {
        return Err(Error::UndefinedMetric("baseline epoch time is zero".into()));
    }
    Ok(100.0 * (mean(folding) - base) / base)
}

/// Per-layer measurements averaged over a set of evaluation sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub variance: Vec<f64>,
    pub head_utilization: Vec<f64>,
    pub sparsity: Vec<f64>,
}

pub fn layer_metrics(
    params: &Parameters,
    cfg: &ModelConfig,
    sequences: &[&[usize]],
    tau: f64,
    eps: f64,
) -> Result<LayerMetrics> {
    if sequences.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation sequences".into()));
    }
    let layers = cfg.n_layers;
    let mut out = LayerMetrics {
        variance: vec![0.0; layers],
        head_utilization: vec![0.0; layers],
        sparsity: vec![0.0; layers],
    };
    for seq in sequences {
        let (_, trace) = forward(params, cfg, seq)?;
        for l in 0..layers {
            out.variance[l] += intra_layer_variance(&trace, l)?;
            out.head_utilization[l] += attention_head_utilization(&trace, l, tau)?;
            out.sparsity[l] += activation_sparsity(&trace, l, eps)?;
        }
    }
    let k = sequences.len() as f64;
    for v in out
        .variance
        .iter_mut()
        .chain(&mut out.head_utilization)
        .chain(&mut out.sparsity)
    {
        *v /= k;
    }
    Ok(out)
}

/// Everything measured for one model over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per layer, from the final evaluation.
    pub layers: LayerMetrics,
    /// Held-out perplexity per corpus category.
    pub perplexity: BTreeMap<String, f64>,
    /// Reordering percentage per category (greedy continuation against the held-out text).
    pub reordering: BTreeMap<String, f64>,
    /// Training loss at the end of every epoch.
    pub epoch_loss: Vec<f64>,
    /// Per-epoch layer metrics.
    pub epoch_layers: Vec<LayerMetrics>,
    /// Wall-clock seconds per epoch. Kept out of byte-stable outputs.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
    /// Final folding gate per layer (empty for the baseline).
    pub gates: Vec<f64>,
    /// Echo of the configuration that produced the report.
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Checks the range invariants of every reported quantity.
    pub fn validate(&self) -> Result<()> {
        let bad =
            |what: &str, v: f64| Err(Error::UndefinedMetric(format!("{what} out of range: {v}")));
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        for ls in std::iter::once(&self.layers).chain(&self.epoch_layers) {
            if let Some(&v) = ls.head_utilization.iter().find(|&&v| !pct(v)) {
                return bad("head utilization", v);
            }
            if let Some(&v) = ls.sparsity.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                return bad("sparsity", v);
            }
            if let Some(&v) = ls.variance.iter().find(|&&v| !(v >= 0.0 && v.is_finite())) {
                return bad("variance", v);
            }
        }
        if let Some(&v) = self
            .perplexity
            .values()
            .find(|&&v| !(v >= 1.0 && v.is_finite()))
        {
            return bad("perplexity", v);
        }
        if let Some(&v) = self.reordering.values().find(|&&v| !pct(v)) {
            return bad("reordering", v);
        }
        Ok(())
    }
}
