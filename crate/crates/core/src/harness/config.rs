use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_SPARSITY_EPS, DEFAULT_TAU};
use crate::model::{AdamConfig, ModelConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Input tokens per training window; at most `max_seq`.
    pub window: usize,
    /// Drives data order and every other random choice of the run. Required.
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Caps the optimizer steps per epoch; 0 means a full pass.
    #[serde(default)]
    pub max_steps_per_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub tau: f64,
    pub eps: f64,
    /// Perplexity window stride; 0 means `max_seq`.
    pub perplexity_stride: usize,
    /// Held-out windows per category used for the per-layer metrics.
    pub eval_sequences: usize,
    /// Prompts per category drawn from held-out text for the reordering measurement.
    pub reorder_prompts_per_category: usize,
    pub reorder_prompt_len: usize,
    pub reorder_new_tokens: usize,
    /// Extra prompts whose greedy continuations are compared across the two models.
    pub reorder_prompts: Vec<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            tau: DEFAULT_TAU,
            eps: DEFAULT_SPARSITY_EPS,
            perplexity_stride: 0,
            eval_sequences: 8,
            reorder_prompts_per_category: 4,
            reorder_prompt_len: 32,
            reorder_new_tokens: 32,
            reorder_prompts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    /// Category name to a file, or to a directory whose files are concatenated.
    pub data: BTreeMap<String, PathBuf>,
    pub training: TrainingConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub output: PathBuf,
    /// Set by [`Ablation::apply`]; labels the result set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data and output paths resolve against the file's
    /// directory.
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.data.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        if self.data.is_empty() {
            return Err(Error::Config(
                "at least one corpus category is required".into(),
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.window < 1 || t.window > self.model.max_seq {
            return Err(Error::Config(format!(
                "batch_size must be positive and window in [1, {}]",
                self.model.max_seq
            )));
        }
        let m = &self.metrics;
        if !(0.0..=1.0).contains(&m.tau) || m.tau == 0.0 || m.eps.is_nan() || m.eps <= 0.0 {
            return Err(Error::Config(
                "metrics.tau must be in (0, 1] and eps positive".into(),
            ));
        }
        if m.reorder_prompt_len == 0
            || m.reorder_prompt_len + m.reorder_new_tokens > self.model.max_seq
        {
            return Err(Error::Config(format!(
                "reorder prompt plus continuation must fit in max_seq {}",
                self.model.max_seq
            )));
        }
        Ok(())
    }

    pub fn perplexity_stride(&self) -> usize {
        match self.metrics.perplexity_stride {
            0 => self.model.max_seq,
            s => s,
        }
    }
}

/// Switches off one component of the folding module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// `alpha = 0`: no pull toward cluster centers.
    Attraction,
    /// `gamma = 0`: no pairwise cohesion.
    Cohesion,
    /// `beta = 0` and `lambda = 0`: no explicit Laplacian smoothing.
    Laplacian,
    /// Gates pinned fully open instead of learned.
    Gate,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Attraction,
        Ablation::Cohesion,
        Ablation::Laplacian,
        Ablation::Gate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Attraction => "attraction",
            Ablation::Cohesion => "cohesion",
            Ablation::Laplacian => "laplacian",
            Ablation::Gate => "gate",
        }
    }

    /// Returns the ablated config, writing into an `ablate-<term>` subdirectory.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        let f = &mut out.model.folding;
        match self {
            Ablation::Attraction => f.alpha = 0.0,
            Ablation::Cohesion => f.gamma = 0.0,
            Ablation::Laplacian => {
                f.beta = 0.0;
                f.lambda = 0.0;
            }
            Ablation::Gate => out.model.fixed_gate = Some(1.0),
        }
        out.output = cfg.output.join(format!("ablate-{}", self.name()));
        out.ablation = Some(self);
        out
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation '{s}'; expected attraction, cohesion, laplacian or gate"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "data": {"prose": "text/prose.txt"},
        "training": {"epochs": 1, "batch_size": 2, "window": 32, "seed": 9},
        "output": "out"
    }"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.metrics, MetricsConfig::default());
        assert_eq!(cfg.perplexity_stride(), 128);
        let round = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfig::from_path(&path).unwrap();
        assert_eq!(cfg.data["prose"], dir.path().join("text/prose.txt"));
        assert_eq!(cfg.output, dir.path().join("out"));
    }

    #[test]
    fn seed_and_schema_are_required() {
        let no_seed = MINIMAL.replace(r#", "seed": 9"#, "");
        assert!(matches!(
            RunConfig::from_json(&no_seed),
            Err(Error::Config(_))
        ));
        let old = MINIMAL.replace(r#""schema_version": 1"#, r#""schema_version": 0"#);
        assert!(RunConfig::from_json(&old).is_err());
        let typo = MINIMAL.replace("batch_size", "batchsize");
        assert!(RunConfig::from_json(&typo).is_err());
        let long = MINIMAL.replace(r#""window": 32"#, r#""window": 500"#);
        assert!(RunConfig::from_json(&long).is_err());
    }

    #[test]
    fn ablations_zero_one_term() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let a = Ablation::Cohesion.apply(&cfg);
        assert_eq!(a.model.folding.gamma, 0.0);
        assert_eq!(a.model.folding.alpha, cfg.model.folding.alpha);
        assert_eq!(a.output, PathBuf::from("out/ablate-cohesion"));
        assert_eq!(Ablation::Gate.apply(&cfg).model.fixed_gate, Some(1.0));
        assert_eq!(Ablation::Attraction.apply(&cfg).model.folding.alpha, 0.0);
        assert_eq!(Ablation::Laplacian.apply(&cfg).model.folding.beta, 0.0);
        assert_eq!("gate".parse::<Ablation>().unwrap(), Ablation::Gate);
        assert!("dropout".parse::<Ablation>().is_err());
    }
}
