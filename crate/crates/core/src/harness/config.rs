//! Training configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multipliers::{OptimizerConfig, OptimizerKind, DEFAULT_OMEGA};
use crate::objectives::RolloutOptions;
use crate::policy::NetConfig;
use crate::world::ObservationConfig;

/// Reference values of the full-scale setup, used to report deviations.
pub mod reference {
    pub const BATCH_SIZE: usize = 16;
    pub const ITERATIONS: usize = 100_000;
    pub const VALIDATION_INTERVAL: usize = 2_000;
    pub const LEARNING_RATE: f64 = 1e-4;
    pub const CLIP_NORM: f64 = 1.0;
    pub const OMEGA: [f64; 3] = [0.6, 0.3, 0.1];
    pub const LATENT_PERIOD: usize = 5;
    pub const HORIZON: usize = 40;
    pub const GAMMA: f64 = 1.0;
    pub const EVAL_ROLLOUTS: usize = 16;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Scenarios per iteration `B`.
    pub batch_size: usize,
    /// Update steps `M`.
    pub iterations: usize,
    /// Iterations between validation passes.
    pub validation_interval: usize,
    /// Regularization weights for ELBO-CL, ELBO-OL and the RL return.
    pub omega: [f64; 3],
    /// Latent duration `H`.
    pub latent_period: usize,
    /// Rollout horizon `T`.
    pub horizon: usize,
    pub gamma: f64,
    /// Root of every random stream in a run.
    pub seed: u64,
    /// Rayon worker threads for batch rollouts.
    pub workers: usize,
    /// Sampled rollouts per validation scene.
    pub eval_rollouts: usize,
    pub net: NetConfig,
    pub obs: ObservationConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: reference::BATCH_SIZE,
            iterations: 2_000,
            validation_interval: 200,
            omega: DEFAULT_OMEGA,
            latent_period: reference::LATENT_PERIOD,
            horizon: reference::HORIZON,
            gamma: reference::GAMMA,
            seed: 0,
            workers: 1,
            eval_rollouts: reference::EVAL_ROLLOUTS,
            net: NetConfig::desk(),
            obs: ObservationConfig::desk(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("validation_interval", self.validation_interval),
            ("latent_period", self.latent_period),
            ("horizon", self.horizon),
            ("workers", self.workers),
            ("eval_rollouts", self.eval_rollouts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "omega entries must be finite and non-negative, got {:?}",
                self.omega
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        Ok(())
    }

    /// Rollout options for training.
    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            latent_period: self.latent_period,
            obs: self.obs,
            gamma: self.gamma,
            horizon: Some(self.horizon),
            ..RolloutOptions::default()
        }
    }

    /// Human-readable differences from the reference setup.
    pub fn deviations(&self) -> Vec<String> {
        use reference as r;
        let mut out = Vec::new();
        let mut diff = |name: &str, ours: String, theirs: String| {
            if ours != theirs {
                out.push(format!("{name}: {ours} (reference {theirs})"));
            }
        };
        diff("batch_size", self.batch_size.to_string(), r::BATCH_SIZE.to_string());
        diff("iterations", self.iterations.to_string(), r::ITERATIONS.to_string());
        diff(
            "validation_interval",
            self.validation_interval.to_string(),
            r::VALIDATION_INTERVAL.to_string(),
        );
        diff("learning_rate", self.optimizer.lr.to_string(), r::LEARNING_RATE.to_string());
        diff(
            "optimizer",
            format!("{:?}", self.optimizer.kind),
            format!("{:?}", OptimizerKind::AdamW),
        );
        diff(
            "clip_norm",
            format!("{:?}", self.optimizer.clip_norm),
            format!("{:?}", Some(r::CLIP_NORM)),
        );
        diff("omega", format!("{:?}", self.omega), format!("{:?}", r::OMEGA));
        diff(
            "latent_period",
            self.latent_period.to_string(),
            r::LATENT_PERIOD.to_string(),
        );
        diff("horizon", self.horizon.to_string(), r::HORIZON.to_string());
        diff("gamma", self.gamma.to_string(), r::GAMMA.to_string());
        diff(
            "eval_rollouts",
            self.eval_rollouts.to_string(),
            r::EVAL_ROLLOUTS.to_string(),
        );
        diff(
            "net",
            format!("{:?}", self.net),
            format!("{:?}", NetConfig::default()),
        );
        diff(
            "obs",
            format!("{:?}", self.obs),
            format!("{:?}", ObservationConfig::default()),
        );
        let sum: f64 = self.omega.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            out.push(format!("omega sums to {sum} (not normalized)"));
        }
        out
    }

    /// Logs every deviation at warn level.
    pub fn log_deviations(&self) {
        for d in self.deviations() {
            log::warn!("config deviation: {d}");
        }
    }
}
