//! Flat key-value run configuration, read from TOML.
//!
//! ```toml
//! alpha = 0.5
//! iterations = 800
//! buffer_cap = 4.0
//! scale = 2.0
//! ladder = [1, 5, 8, 16, 35]
//! k = 8
//! fov = 0.33
//! network = "small"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, PpoConfig};
use crate::geometry::{FieldOfView, TileGrid};
use crate::identifier::IdentifierConfig;
use crate::orchestrator::TrainConfig;
use crate::simenv::{BitrateLadder, EnvConfig};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub prefs_per_iteration: usize,
    pub buffer_cap: f64,
    pub scale: f64,
    pub ladder: Vec<f64>,
    /// History length of the throughput/accuracy/QoE features.
    pub k: usize,
    /// Field of view as a fraction of the frame in both directions.
    pub fov: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub video_width: f64,
    pub video_height: f64,
    pub chunk_duration: f64,
    pub viewport_rate_hz: f64,
    pub predictor: String,
    /// `full` or `small` layer widths for agent and identifier.
    pub network: String,
    pub entropy_coef: f64,
    pub discount: f64,
    pub learning_rate: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub identifier_lr: f64,
    pub identifier_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ppo = PpoConfig::default();
        let grid = TileGrid::default();
        Self {
            alpha: 0.5,
            iterations: 500,
            prefs_per_iteration: 4,
            buffer_cap: 4.0,
            scale: 2.0,
            ladder: BitrateLadder::default().rungs().to_vec(),
            k: 8,
            fov: 0.33,
            grid_rows: grid.rows,
            grid_cols: grid.cols,
            video_width: grid.video_width,
            video_height: grid.video_height,
            chunk_duration: 1.0,
            viewport_rate_hz: 5.0,
            predictor: "transformer".into(),
            network: "full".into(),
            entropy_coef: ppo.entropy_coef,
            discount: ppo.discount,
            learning_rate: ppo.learning_rate,
            clip: ppo.clip,
            gae_lambda: ppo.gae_lambda,
            ppo_epochs: ppo.epochs,
            minibatch: ppo.minibatch,
            value_coef: ppo.value_coef,
            max_grad_norm: ppo.max_grad_norm,
            identifier_lr: 1e-4,
            identifier_steps: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.grid()?;
        self.ladder()?;
        self.fov()?;
        self.env_config().validate()?;
        self.train_config()?.validate()
    }

    pub fn grid(&self) -> Result<TileGrid, Error> {
        TileGrid::new(self.grid_rows, self.grid_cols, self.video_width, self.video_height)
    }

    pub fn ladder(&self) -> Result<BitrateLadder, Error> {
        BitrateLadder::new(self.ladder.clone())
    }

    pub fn fov(&self) -> Result<FieldOfView, Error> {
        FieldOfView::new(self.fov, self.fov)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            buffer_cap: self.buffer_cap,
            scale: self.scale,
            history: self.k,
            ..EnvConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let rungs = self.ladder.len();
        let actions = rungs * (rungs + 1) / 2;
        let (agent, identifier) = match self.network.as_str() {
            "full" => (AgentConfig::default(), IdentifierConfig::default()),
            "small" => (AgentConfig::small(), IdentifierConfig::small()),
            other => return Err(Error::Config(format!("network must be full or small, got {other:?}"))),
        };
        Ok(TrainConfig {
            iterations: self.iterations,
            prefs_per_iteration: self.prefs_per_iteration,
            alpha: self.alpha,
            identifier_lr: self.identifier_lr,
            identifier_steps: self.identifier_steps,
            freeze_identifier: false,
            agent: AgentConfig { actions, ..agent },
            identifier: IdentifierConfig { actions, ..identifier },
            ppo: PpoConfig {
                clip: self.clip,
                gae_lambda: self.gae_lambda,
                discount: self.discount,
                epochs: self.ppo_epochs,
                minibatch: self.minibatch,
                value_coef: self.value_coef,
                entropy_coef: self.entropy_coef,
                learning_rate: self.learning_rate,
                max_grad_norm: self.max_grad_norm,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("alpha = 0.0\nladder = [1.0, 2.0]\nnetwork = \"small\"\n").unwrap();
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.k, 8);
        let t = cfg.train_config().unwrap();
        assert_eq!(t.agent.actions, 3);
        assert_eq!(t.ppo.entropy_coef, 0.02);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("alpah = 0.5").is_err());
        assert!(RunConfig::from_toml_str("alpha = 2.0").is_err());
        assert!(RunConfig::from_toml_str("ladder = [5.0, 1.0]").is_err());
    }
}
