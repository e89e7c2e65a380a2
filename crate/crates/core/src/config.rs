//! Run configuration.
//!
//! Defaults follow the reference hyperparameter table (DDPM with 50 steps,
//! `H = 8`, `D = 256`, 8 decoder layers, `N = 2`, `L = 2`, `M = 2`,
//! `S = 8`, dropout 0.3, `r = 5`, batch 64, lr 1e-4, EMA 0.999). Those are
//! far beyond one CPU core; [`RunConfig::desk`] is the scaled-down
//! reference used by the experiments in this repository.
//!
//! Configs are JSON objects; every field is optional and unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::compressor::CompressorConfig;
use crate::diffusion::{DenoiserConfig, NoiseSchedule};
use crate::envs::{EnvOverrides, EnvSpec, Task};
use crate::error::{Error, Result};
use crate::memory::CachePolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub env: EnvOverrides,
    /// Dataset file; relative paths resolve against the output directory.
    pub dataset: PathBuf,
    pub seed: u64,

    pub num_demos: usize,
    pub expert_noise: f64,

    /// `D`.
    pub dim: usize,
    /// `N`.
    pub compressor_depth: usize,
    /// `M`.
    pub memory_tokens: usize,
    /// `L`.
    pub window: usize,
    /// `S`.
    pub cache_size: usize,
    /// `H`.
    pub horizon: usize,
    pub denoiser_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub causal: bool,

    /// `K`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub cache_policy: CachePolicy,
    /// Memory-token dropout `p`.
    pub dropout: f64,
    /// `r`.
    pub subsample_ratio: usize,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_steps: usize,
    pub ema_rate: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,

    pub eval_episodes: usize,
    /// Actions executed per sampled chunk; `None` means `H`.
    pub replan_interval: Option<usize>,

    /// Replace episodic memory with the null block everywhere (training
    /// and evaluation); the compressor still runs.
    pub zero_episodic: bool,
    /// Drop the memory path entirely: nothing is compressed and the
    /// denoiser sees the null block.
    pub window_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::ShellGame,
            env: EnvOverrides::default(),
            dataset: PathBuf::from("dataset.jsonl"),
            seed: 100,
            num_demos: 100,
            expert_noise: 0.03,
            dim: 256,
            compressor_depth: 2,
            memory_tokens: 2,
            window: 2,
            cache_size: 8,
            horizon: 8,
            denoiser_depth: 8,
            heads: 1,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            causal: false,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            cache_policy: CachePolicy::Fifo,
            dropout: 0.3,
            subsample_ratio: 5,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            grad_steps: 600_000,
            ema_rate: 0.999,
            checkpoint_every: 0,
            eval_episodes: 100,
            replan_interval: None,
            zero_episodic: false,
            window_only: false,
        }
    }
}

impl RunConfig {
    /// Desk-scale reference: small enough to train on one CPU core.
    pub fn desk(task: Task) -> Self {
        Self {
            task,
            dim: 32,
            denoiser_depth: 1,
            mlp_ratio: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_steps: 20_000,
            ema_rate: 0.995,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 2 != 0 {
            return bad(format!("dim must be even and positive, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        for (name, v) in [
            ("compressor_depth", self.compressor_depth),
            ("memory_tokens", self.memory_tokens),
            ("window", self.window),
            ("cache_size", self.cache_size),
            ("horizon", self.horizon),
            ("denoiser_depth", self.denoiser_depth),
            ("mlp_ratio", self.mlp_ratio),
            ("subsample_ratio", self.subsample_ratio),
            ("batch_size", self.batch_size),
            ("num_demos", self.num_demos),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return bad(format!("ema_rate must lie in (0, 1), got {}", self.ema_rate));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.expert_noise < 0.0 {
            return bad("learning_rate must be positive; weight_decay and expert_noise non-negative".into());
        }
        if let Some(0) = self.replan_interval {
            return bad("replan_interval must be at least 1".into());
        }
        if self.replan_interval.is_some_and(|r| r > self.horizon) {
            return bad(format!("replan_interval exceeds horizon {}", self.horizon));
        }
        self.schedule()?;
        self.env_spec()?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::with_overrides(self.task, &self.env)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn replan(&self) -> usize {
        self.replan_interval.unwrap_or(self.horizon)
    }

    /// The denoiser sees null memory.
    pub fn memory_disabled(&self) -> bool {
        self.zero_episodic || self.window_only
    }

    pub fn compressor_config(&self) -> CompressorConfig {
        CompressorConfig {
            dim: self.dim,
            tokens: self.memory_tokens,
            depth: self.compressor_depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            activation: self.activation,
        }
    }

    pub fn denoiser_config(&self, action_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.dim,
            horizon: self.horizon,
            action_dim,
            window: self.window,
            memory_tokens: self.memory_tokens,
            depth: self.denoiser_depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            activation: self.activation,
            causal: self.causal,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Resolves the dataset path against `out_dir` when relative.
    pub fn dataset_path(&self, out_dir: &Path) -> PathBuf {
        if self.dataset.is_absolute() {
            self.dataset.clone()
        } else {
            out_dir.join(&self.dataset)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = RunConfig::default();
        assert_eq!((c.dim, c.compressor_depth, c.memory_tokens, c.window, c.cache_size, c.horizon), (256, 2, 2, 2, 8, 8));
        assert_eq!((c.denoiser_depth, c.diffusion_steps, c.subsample_ratio, c.batch_size), (8, 50, 5, 64));
        assert_eq!((c.dropout, c.learning_rate, c.ema_rate), (0.3, 1e-4, 0.999));
        assert_eq!(c.cache_policy, CachePolicy::Fifo);
        assert_eq!(c.replan(), 8);
        c.validate().unwrap();
        RunConfig::desk(Task::Reach).validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"dim": 16, "colour": 3}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let c: RunConfig = serde_json::from_str(r#"{"dim": 16, "task": "reach", "cache_policy": "adjsim"}"#).unwrap();
        assert_eq!((c.dim, c.task, c.cache_policy), (16, Task::Reach, CachePolicy::Adjsim));
        assert_eq!(c.window, 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for json in [r#"{"dim": 15}"#, r#"{"dropout": 1.0}"#, r#"{"heads": 3}"#, r#"{"replan_interval": 9}"#, r#"{"env": {"delay": 50}}"#] {
            let c: RunConfig = serde_json::from_str(json).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{json}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = RunConfig::desk(Task::RememberColor);
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
        let missing = dir.path().join("nope.json");
        let err = RunConfig::load(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.json"));
    }
}
