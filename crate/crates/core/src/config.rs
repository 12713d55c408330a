//! Experiment configuration: defaults, overlaid by a TOML or JSON file, then
//! by dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assignment::{LossOptions, LossWeights};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic_world::WorldConfig;
use crate::tracker::InferenceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clips per step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fractions of `steps` after which the learning rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Frames sampled per training clip.
    pub clip_frames: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_at: vec![0.9, 0.95],
            decay_factor: 0.1,
            clip_frames: 2,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 || self.clip_frames == 0 {
            return Err(Error::config("batch and clip_frames must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("Adam betas must be in [0, 1) and eps positive"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(format!("decay_at fractions must be in [0, 1]: {:?}", self.decay_at)));
        }
        if !(self.weight_decay >= 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and decay_factor > 0"));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|f| step >= (**f * self.steps as f64).floor() as usize)
            .count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            output_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.model.in_channels != self.world.embed_dim || self.model.embed_dim != self.world.embed_dim {
            return Err(Error::config(format!(
                "model in_channels ({}) and embed_dim ({}) must equal world embed_dim ({})",
                self.model.in_channels, self.model.embed_dim, self.world.embed_dim
            )));
        }
        let s = self.model.stride();
        if self.world.height % s != 0 || self.world.width % s != 0 {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by the model stride {s}",
                self.world.height, self.world.width
            )));
        }
        if self.train.clip_frames > self.world.frames {
            return Err(Error::config(format!(
                "clip_frames {} exceeds video length {}",
                self.train.clip_frames, self.world.frames
            )));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            all_class_bce: self.model.all_class_bce,
        }
    }

    /// Sets both the dataset and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `file` (TOML unless it ends in `.json`), then overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = ExperimentConfig::default().to_value();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            let layer: Value = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            } else {
                let t: toml::Value =
                    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                serde_json::to_value(t)?
            };
            merge(&mut v, layer);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }
}

/// Recursive object merge; non-object values replace.
pub fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise; the path must already exist.
pub fn apply_override(v: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = v;
    for key in path.split('.') {
        slot = slot
            .get_mut(key)
            .ok_or_else(|| Error::config(format!("unknown config key `{path}`")))?;
    }
    *slot = value;
    Ok(())
}
