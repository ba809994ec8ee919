//! Run configuration: JSON loading, presets, validation and a stable hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::advantage::GaeConfig;
use crate::envs::TaskKind;
use crate::error::{Error, Result};
use crate::nn::AdamWConfig;
use crate::objectives::ClipConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Tppo,
    #[serde(alias = "ppo")]
    VanillaPpo,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tppo" => Ok(Algorithm::Tppo),
            "ppo" | "vanilla_ppo" => Ok(Algorithm::VanillaPpo),
            other => Err(Error::config("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Tppo => "tppo",
            Algorithm::VanillaPpo => "vanilla_ppo",
        })
    }
}

/// Every knob of a training run. Field names double as JSON keys; `l`, `L`
/// and `K` are accepted as aliases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub task: TaskKind,
    /// Optional train/eval split file; otherwise prompts are generated from `seed`.
    pub tasks_manifest: Option<String>,
    pub algorithm: Algorithm,
    #[serde(alias = "K")]
    pub prompts_per_step: usize,
    pub samples_per_prompt: usize,
    pub minibatch_count: usize,
    #[serde(alias = "l")]
    pub window_len: usize,
    #[serde(alias = "L")]
    pub max_len: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub xi_low: f64,
    pub xi_high: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub exclusion_m: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub hidden: usize,
    /// Half-width of the uniform first-layer weight init.
    pub init_scale: f64,
    pub history: usize,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: u64,
    pub eval_tasks: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    /// Stop as soon as an evaluation reaches this success rate.
    pub target_success: Option<f64>,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: k = L / l = 3.
    pub fn desk() -> Self {
        RunConfig {
            preset: None,
            task: TaskKind::ParityChain,
            tasks_manifest: None,
            algorithm: Algorithm::Tppo,
            prompts_per_step: 32,
            samples_per_prompt: 1,
            minibatch_count: 1,
            window_len: 32,
            max_len: 96,
            gamma: 0.99,
            lambda: 0.95,
            eps_low: 0.2,
            eps_high: 0.28,
            xi_low: 0.5,
            xi_high: 0.6,
            policy_lr: 1e-3,
            value_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            exclusion_m: 0,
            total_steps: 3000,
            seed: 0,
            hidden: 64,
            init_scale: crate::nn::DEFAULT_INIT_SCALE,
            history: crate::nn::DEFAULT_HISTORY,
            eval_every: 50,
            eval_tasks: 16,
            eval_samples: 32,
            eval_temperature: 1.0,
            eval_top_p: 0.7,
            target_success: None,
            checkpoint_every: 0,
        }
    }

    /// The large-model hyperparameters: 512 prompts × 16 samples, 16
    /// minibatches, 24k/8k lengths, learning rates 1e-6 / 2e-6.
    pub fn paper_32b() -> Self {
        RunConfig {
            preset: Some("paper-32b".into()),
            prompts_per_step: 512,
            samples_per_prompt: 16,
            minibatch_count: 16,
            window_len: 8 * 1024,
            max_len: 24 * 1024,
            policy_lr: 1e-6,
            value_lr: 2e-6,
            gamma: 1.0,
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper-32b" => Ok(RunConfig::paper_32b()),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }

    /// Total slots: prompts × samples per prompt.
    pub fn slots(&self) -> usize {
        self.prompts_per_step * self.samples_per_prompt
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            xi_low: self.xi_low,
            xi_high: self.xi_high,
        }
    }

    pub fn policy_optimizer(&self) -> AdamWConfig {
        self.adamw(self.policy_lr)
    }

    pub fn value_optimizer(&self) -> AdamWConfig {
        self.adamw(self.value_lr)
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prompts_per_step (K)", self.prompts_per_step),
            ("samples_per_prompt", self.samples_per_prompt),
            ("minibatch_count", self.minibatch_count),
            ("window_len (l)", self.window_len),
            ("max_len (L)", self.max_len),
            ("hidden", self.hidden),
            ("history", self.history),
            ("eval_samples", self.eval_samples),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.window_len > self.max_len {
            return Err(Error::config(
                "window_len (l)",
                format!("l = {} exceeds L = {}", self.window_len, self.max_len),
            ));
        }
        self.gae().validate()?;
        self.clip().validate()?;
        for (field, lr) in [("policy_lr", self.policy_lr), ("value_lr", self.value_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(field, format!("{lr} must be non-negative")));
            }
        }
        // AdamW's own checks, with a stand-in learning rate
        AdamWConfig {
            lr: 1.0,
            ..self.policy_optimizer()
        }
        .validate()?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be finite and non-negative"));
        }
        if !(self.eval_temperature > 0.0) {
            return Err(Error::config("eval_temperature", "must be positive"));
        }
        if !(self.eval_top_p > 0.0 && self.eval_top_p <= 1.0) {
            return Err(Error::config("eval_top_p", "must be in (0, 1]"));
        }
        if let Some(t) = self.target_success {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("target_success", "must be in [0, 1]"));
            }
        }
        if let Some(p) = &self.preset {
            RunConfig::preset(p)?;
        }
        Ok(())
    }

    /// Parses a JSON config. A `preset` key selects the base values; every
    /// other key overrides it. Unknown keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let Value::Object(user) = user else {
            return Err(Error::config("<root>", "config must be a JSON object"));
        };
        let base = match user.get("preset") {
            None | Some(Value::Null) => RunConfig::desk(),
            Some(Value::String(name)) => RunConfig::preset(name)?,
            Some(_) => return Err(Error::config("preset", "must be a string")),
        };
        let Value::Object(mut merged) = serde_json::to_value(&base)? else {
            unreachable!("RunConfig serializes to an object");
        };
        for (k, v) in user {
            let key = match k.as_str() {
                "K" => "prompts_per_step".to_string(),
                "l" => "window_len".to_string(),
                "L" => "max_len".to_string(),
                _ => k,
            };
            if !merged.contains_key(&key) {
                return Err(Error::config(key, "unknown configuration key"));
            }
            merged.insert(key, v);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| {
            Error::config("<config>", e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 over the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(&serde_json::to_value(self)?)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json_str(&std::fs::read_to_string(path)?)
}

fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Hash of a JSON value that ignores object key order.
pub fn canonical_hash(v: &Value) -> Result<String> {
    let text = serde_json::to_string(&canonicalize(v))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
