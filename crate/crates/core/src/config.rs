//! Flat JSON run configuration: strict keys, documented defaults, and
//! conversion into the per-module configs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::env::RewardConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::observe::ObsConfig;
use crate::trainer::TrainConfig;
use crate::world::{benchmark_maps, load_map_dir, GridMap};

/// Overrides `seed` when set.
pub const SEED_ENV: &str = "RAVN_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub audio_seed: u64,
    pub eval_seed: u64,
    /// Directory of `*.map` files; `null` uses the bundled benchmark.
    pub map_dir: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub total_steps: u64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub lambda_aux: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub heard_classes: Vec<u32>,
    pub unheard_classes: Vec<u32>,
    pub max_steps: u32,
    pub checkpoint_interval: usize,

    pub audio_features: usize,
    pub visual_features: usize,
    pub geo_features: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
    pub log_var_min: f64,
    pub log_var_max: f64,

    pub freq_bins: usize,
    pub rays: usize,
    pub d_max: f64,
    pub fov_degrees: f64,
    pub ray_step: f64,
    pub ray_range: f64,
    pub azimuth_noise_base: f64,
    pub azimuth_noise_per_wall: f64,
    pub azimuth_noise_cap: u32,
    pub spectral_noise_base: f64,
    pub spectral_noise_per_wall: f64,

    pub success_reward: f64,
    pub progress_scale: f64,
    pub step_penalty: f64,

    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    /// Trajectory SVGs written per evaluated split.
    pub svg_episodes: usize,
    /// Training seeds used by `ablate`.
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let o = ObsConfig::default();
        let t = TrainConfig::default();
        let r = RewardConfig::default();
        RunConfig {
            variant: m.variant,
            seed: t.seed,
            audio_seed: o.audio_seed,
            eval_seed: 1_000_003,
            map_dir: None,
            out_dir: PathBuf::from("runs/default"),
            total_steps: t.total_steps,
            rollout_len: t.rollout_len,
            num_envs: t.num_envs,
            gamma: t.gamma,
            gae_lambda: t.gae_lambda,
            ppo_epochs: t.ppo_epochs,
            minibatches: t.minibatches,
            learning_rate: t.learning_rate,
            adam_eps: t.adam_eps,
            max_grad_norm: t.max_grad_norm,
            lambda_aux: t.lambda_aux,
            clip_eps: t.clip_eps,
            value_coef: t.value_coef,
            entropy_coef: t.entropy_coef,
            heard_classes: t.heard_classes,
            unheard_classes: t.unheard_classes,
            max_steps: t.max_steps,
            checkpoint_interval: t.checkpoint_interval,
            audio_features: m.audio_features,
            visual_features: m.visual_features,
            geo_features: m.geo_features,
            hidden: m.hidden,
            gate_hidden: m.gate_hidden,
            log_var_min: m.log_var_min,
            log_var_max: m.log_var_max,
            freq_bins: o.freq_bins,
            rays: o.rays,
            d_max: o.d_max,
            fov_degrees: o.fov_degrees,
            ray_step: o.ray_step,
            ray_range: o.ray_range,
            azimuth_noise_base: o.azimuth_noise_base,
            azimuth_noise_per_wall: o.azimuth_noise_per_wall,
            azimuth_noise_cap: o.azimuth_noise_cap,
            spectral_noise_base: o.spectral_noise_base,
            spectral_noise_per_wall: o.spectral_noise_per_wall,
            success_reward: r.success_reward,
            progress_scale: r.progress_scale,
            step_penalty: r.step_penalty,
            eval_episodes: 200,
            eval_mode: EvalMode::Greedy,
            svg_episodes: 5,
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            freq_bins: self.freq_bins,
            rays: self.rays,
            audio_features: self.audio_features,
            visual_features: self.visual_features,
            geo_features: self.geo_features,
            hidden: self.hidden,
            gate_hidden: self.gate_hidden,
            variant: self.variant,
            log_var_min: self.log_var_min,
            log_var_max: self.log_var_max,
        }
    }

    pub fn observation(&self) -> ObsConfig {
        ObsConfig {
            freq_bins: self.freq_bins,
            rays: self.rays,
            d_max: self.d_max,
            azimuth_noise_base: self.azimuth_noise_base,
            azimuth_noise_per_wall: self.azimuth_noise_per_wall,
            azimuth_noise_cap: self.azimuth_noise_cap,
            spectral_noise_base: self.spectral_noise_base,
            spectral_noise_per_wall: self.spectral_noise_per_wall,
            fov_degrees: self.fov_degrees,
            ray_step: self.ray_step,
            ray_range: self.ray_range,
            audio_seed: self.audio_seed,
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            success_reward: self.success_reward,
            progress_scale: self.progress_scale,
            step_penalty: self.step_penalty,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            rollout_len: self.rollout_len,
            num_envs: self.num_envs,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            ppo_epochs: self.ppo_epochs,
            minibatches: self.minibatches,
            learning_rate: self.learning_rate,
            adam_eps: self.adam_eps,
            max_grad_norm: self.max_grad_norm,
            lambda_aux: self.lambda_aux,
            clip_eps: self.clip_eps,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            seed: self.seed,
            heard_classes: self.heard_classes.clone(),
            unheard_classes: self.unheard_classes.clone(),
            max_steps: self.max_steps,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        let invalid = |key: &str, reason: &str| {
            Err(Error::Validation {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.unheard_classes.is_empty() {
            return invalid("unheard_classes", "must not be empty");
        }
        if let Some(dir) = &self.map_dir {
            if !dir.is_dir() {
                return invalid("map_dir", &format!("{} is not a directory", dir.display()));
            }
        }
        if self.d_max <= 0.0 {
            return invalid("d_max", "must be positive");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return invalid("fov_degrees", "must lie in (0, 180)");
        }
        if self.ray_step <= 0.0 {
            return invalid("ray_step", "must be positive");
        }
        if self.ray_range <= 0.0 {
            return invalid("ray_range", "must be positive");
        }
        if self.eval_episodes == 0 {
            return invalid("eval_episodes", "must be positive");
        }
        if self.ablate_seeds.is_empty() {
            return invalid("ablate_seeds", "must not be empty");
        }
        Ok(())
    }

    /// The configured map set, in load order.
    pub fn load_maps(&self) -> Result<Vec<(String, GridMap)>> {
        match &self.map_dir {
            Some(dir) => load_map_dir(dir),
            None => Ok(benchmark_maps()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved config into `out_dir`.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Parses and validates a config document. Syntax errors carry line and
/// column; type and value errors name the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "expected a JSON object".into(),
        });
    };
    for (key, v) in &obj {
        let single = Value::Object(Map::from_iter([(key.clone(), v.clone())]));
        if let Err(e) = serde_json::from_value::<RunConfig>(single) {
            return Err(Error::Validation {
                key: key.clone(),
                reason: e.to_string(),
            });
        }
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Validation {
        key: "<root>".into(),
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file, applying `RAVN_SEED` if set.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s.trim().parse().map_err(|_| Error::Validation {
            key: SEED_ENV.into(),
            reason: format!("`{s}` is not an unsigned integer"),
        })?;
    }
    Ok(cfg)
}
