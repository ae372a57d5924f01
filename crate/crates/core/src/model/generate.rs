use crate::error::{Error, Result};
use crate::math::RngState;
use crate::model::config::ModelConfig;
use crate::model::forward::logits;
use crate::model::params::Parameters;

#[derive(Clone, Debug, PartialEq)]
pub enum Decoding {
    /// Arg-max at every step; ties go to the lowest token id.
    Greedy,
    /// Softmax sampling at the given temperature from a seeded stream.
    Sampled { seed: u64, temperature: f64 },
}

/// Extends `prompt` by `max_new` tokens. The model sees at most the last `max_seq` tokens.
/// Returns the prompt followed by the generated tokens.
pub fn generate(
    params: &Parameters,
    cfg: &ModelConfig,
    prompt: &[usize],
    max_new: usize,
    decoding: &Decoding,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Config("generation needs a non-empty prompt".into()));
    }
    let mut rng = match decoding {
        Decoding::Sampled { seed, temperature } => {
            if !(*temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            Some(RngState::new(*seed))
        }
        Decoding::Greedy => None,
    };
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        let start = out.len().saturating_sub(cfg.max_seq);
        let z = logits(params, cfg, &out[start..])?;
        let last = z.row(z.rows() - 1);
        let next = match (decoding, rng.as_mut()) {
            (Decoding::Sampled { temperature, .. }, Some(rng)) => sample(last, *temperature, rng),
            _ => argmax(last),
        };
        out.push(next);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, rng: &mut RngState) -> usize {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = row
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Parameters, ModelConfig) {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 6,
            ..ModelConfig::default()
        };
        (Parameters::init(&cfg).unwrap(), cfg)
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn zero_new_returns_prompt() {
        let (p, cfg) = tiny();
        assert_eq!(
            generate(&p, &cfg, &[1, 2, 3], 0, &Decoding::Greedy).unwrap(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let (p, cfg) = tiny();
        assert!(matches!(
            generate(&p, &cfg, &[], 3, &Decoding::Greedy),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn runs_past_context_and_is_deterministic() {
        let (p, cfg) = tiny();
        let greedy = generate(
            &p,
            &cfg,
            b"ab".map(usize::from).as_slice(),
            10,
            &Decoding::Greedy,
        )
        .unwrap();
        assert_eq!(greedy.len(), 12);
        let d = Decoding::Sampled {
            seed: 3,
            temperature: 1.0,
        };
        let a = generate(&p, &cfg, &[7], 8, &d).unwrap();
        let b = generate(&p, &cfg, &[7], 8, &d).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t < 256));
    }

    #[test]
    fn sampling_follows_distribution() {
        let mut rng = RngState::new(1);
        let row = [0.0, (3.0f64).ln()];
        let ones = (0..4000)
            .filter(|_| sample(&row, 1.0, &mut rng) == 1)
            .count();
        let frac = ones as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "{frac}");
    }
}
