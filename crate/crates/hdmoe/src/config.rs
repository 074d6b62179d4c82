//! Flat JSON run configuration.

use std::path::{Path, PathBuf};

use hdmoe_core::losses::{DistanceMetric, LossWeights};
use hdmoe_core::moe::MoEConfig;
use hdmoe_core::optim::AdamConfig;
use hdmoe_core::rfr::{SegmentChoice, SegmentSet};
use hdmoe_core::synthetic::SyntheticConfig;
use hdmoe_core::trainer::InputMode;
use hdmoe_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Every key a config file may hold; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub k_folds: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `cos`, `l1`, `kl` or `mse`.
    pub distance_metric: String,
    /// `both`, or `a_only` for the single-modality ablation.
    pub input: String,
    pub d_in: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_att: usize,
    pub token_len_l1: usize,
    pub token_len_l2: usize,
    /// Routed experts per MoE layer, both levels.
    pub num_experts: usize,
    pub top_k: usize,
    pub expansion: usize,
    pub segment_values: Vec<usize>,
    pub num_bins: usize,
    /// Segment length used at evaluation; `None` draws from the set.
    pub pin_segment: Option<usize>,
    /// Stability repeats at evaluation; 0 skips the report.
    pub repeats: usize,
    pub parallel_folds: usize,
    /// Dataset manifest for `train`, `eval` and `analyze`.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Cohort size for `synth`.
    pub cohort: usize,
    /// `default`, `complementary` or `high_redundancy`.
    pub cohort_kind: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        let opt = AdamConfig::default();
        let w = LossWeights::default();
        let t = TrainConfig::default();
        let m = ModelConfig::paper(32);
        RunConfig {
            seed: t.seed,
            epochs: t.epochs,
            k_folds: t.k_folds,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            alpha: w.alpha,
            beta: w.beta,
            distance_metric: DistanceMetric::Cos.name().into(),
            input: "both".into(),
            d_in: m.d_in,
            d1: m.d1,
            d2: m.d2,
            d_att: m.d_att,
            token_len_l1: m.level1.token_len,
            token_len_l2: m.level2.token_len,
            num_experts: m.level1.num_experts,
            top_k: m.level1.top_k,
            expansion: m.level1.expansion,
            segment_values: m.segments.values().to_vec(),
            num_bins: m.num_bins,
            pin_segment: None,
            repeats: 0,
            parallel_folds: 1,
            manifest: None,
            out_dir: PathBuf::from("out"),
            cohort: 200,
            cohort_kind: "default".into(),
        }
    }

    /// Widths divided by 8 for quick runs.
    pub fn desk() -> Self {
        let m = ModelConfig::desk(32);
        RunConfig {
            d1: m.d1,
            d2: m.d2,
            d_att: m.d_att,
            token_len_l1: m.level1.token_len,
            token_len_l2: m.level2.token_len,
            ..Self::paper()
        }
    }

    /// Lay the keys of a JSON object over `base`.
    pub fn overlay(base: &RunConfig, json: &str, origin: &Path) -> Result<RunConfig> {
        let patch: serde_json::Value = serde_json::from_str(json).map_err(|e| CliError::parse(origin, e.to_string()))?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(CliError::parse(origin, "config must be a JSON object"));
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(CliError::config(format!("{}: unknown key `{k}`", origin.display())));
            }
            obj.insert(k, v);
        }
        serde_json::from_value(merged).map_err(|e| CliError::config(format!("{}: {e}", origin.display())))
    }

    pub fn load(base: &RunConfig, path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::overlay(base, &text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn metric(&self) -> Result<DistanceMetric> {
        DistanceMetric::parse(&self.distance_metric)
            .ok_or_else(|| CliError::config(format!("unknown distance_metric `{}`", self.distance_metric)))
    }

    pub fn input_mode(&self) -> Result<InputMode> {
        match self.input.as_str() {
            "both" => Ok(InputMode::Both),
            "a_only" => Ok(InputMode::ModalityAOnly),
            other => Err(CliError::config(format!("unknown input `{other}` (both | a_only)"))),
        }
    }

    pub fn eval_segment(&self) -> SegmentChoice {
        self.pin_segment.map_or(SegmentChoice::Random, SegmentChoice::Pinned)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let level = |token_len| MoEConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            token_len,
            expansion: self.expansion,
        };
        let cfg = ModelConfig {
            d_in: self.d_in,
            d1: self.d1,
            d2: self.d2,
            d_att: self.d_att,
            num_bins: self.num_bins,
            level1: level(self.token_len_l1),
            level2: level(self.token_len_l2),
            segments: SegmentSet::new(self.segment_values.clone())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            optimizer: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            epochs: self.epochs,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            metric: self.metric()?,
            seed: self.seed,
            k_folds: self.k_folds,
            input: self.input_mode()?,
            segment: SegmentChoice::Random,
        };
        // zero epochs is allowed: predictions then come from the init weights
        if cfg.epochs == 0 {
            TrainConfig { epochs: 1, ..cfg.clone() }.validate()?;
        } else {
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        let base = match self.cohort_kind.as_str() {
            "default" => SyntheticConfig {
                seed: self.seed,
                ..SyntheticConfig::default()
            },
            "complementary" => SyntheticConfig::complementary(self.seed),
            "high_redundancy" => SyntheticConfig::high_redundancy(self.seed),
            other => {
                return Err(CliError::config(format!(
                    "unknown cohort_kind `{other}` (default | complementary | high_redundancy)"
                )))
            }
        };
        let cfg = SyntheticConfig {
            cohort: self.cohort,
            d_in: self.d_in,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check everything used by training and evaluation.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config()?;
        if let Some(s) = self.pin_segment {
            if s == 0 || self.d1 % s != 0 || self.d2 % s != 0 {
                return Err(CliError::config(format!(
                    "pin_segment {s} must divide d1 = {} and d2 = {}",
                    self.d1, self.d2
                )));
            }
        }
        if self.parallel_folds == 0 {
            return Err(CliError::config("parallel_folds must be >= 1"));
        }
        Ok(())
    }
}
