//! Experiment configuration, loaded from JSON.
//!
//! Every field has a default, so a config file only needs the fields it
//! changes. See `README.md` for the schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Deltas, EntranceProfile, FeedEnv, RewardMode, ValueDist};
use crate::error::{Error, Result};
use crate::trainer::{Method, TransferConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source_profile: EntranceProfile,
    pub target_profile: EntranceProfile,
    /// Reward realization used when logging datasets.
    pub reward_mode: RewardMode,
    /// Reward realization used by rollout evaluation.
    pub eval_reward_mode: RewardMode,
    /// Queue items exposed per queue in the state features; defaults to `2k`.
    pub feature_len: Option<usize>,
    pub n_source_requests: usize,
    pub n_target_requests: usize,
    pub eval_episodes: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub baseline: Method,
    pub transfer: TransferConfig,
}

/// Source entrance: divergent users are labelled but behave like regular ones.
pub fn default_source_profile() -> EntranceProfile {
    EntranceProfile {
        entrance_id: "source".into(),
        k: 3,
        t_max: 6,
        n_ad_cand: 24,
        n_org_cand: 24,
        ad_value_dist: ValueDist { mean: 1.0, spread: 0.8 },
        org_value_dist: ValueDist { mean: 1.0, spread: 0.8 },
        click_base: 0.3,
        buy_base: 0.05,
        fatigue: 0.1,
        depth_decay: 0.05,
        divergent_user_frac: 0.5,
        deltas: Deltas::default(),
    }
}

/// Target entrance: same regular users, shifted divergent users.
pub fn default_target_profile() -> EntranceProfile {
    EntranceProfile {
        entrance_id: "target".into(),
        deltas: Deltas { click: 0.5, buy: 0.0, fatigue: -0.1 },
        ..default_source_profile()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_profile: default_source_profile(),
            target_profile: default_target_profile(),
            reward_mode: RewardMode::Stochastic,
            eval_reward_mode: RewardMode::Expected,
            feature_len: None,
            n_source_requests: 50_000,
            n_target_requests: 2_000,
            eval_episodes: 2_000,
            n_seeds: 5,
            base_seed: 0,
            methods: Method::ALL.to_vec(),
            baseline: Method::NoTransfer,
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.source_profile.validate()?;
        self.target_profile.validate()?;
        if self.source_profile.k != self.target_profile.k || self.source_profile.k != self.transfer.k {
            return Err(Error::Config("source, target and transfer configs must agree on k".into()));
        }
        if self.n_source_requests == 0 || self.n_target_requests == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("request and episode counts must be positive".into()));
        }
        self.transfer.validate()
    }

    pub fn source_env(&self) -> Result<FeedEnv> {
        self.env(&self.source_profile, self.reward_mode)
    }

    pub fn target_env(&self) -> Result<FeedEnv> {
        self.env(&self.target_profile, self.reward_mode)
    }

    pub fn eval_env(&self) -> Result<FeedEnv> {
        self.env(&self.target_profile, self.eval_reward_mode)
    }

    fn env(&self, profile: &EntranceProfile, mode: RewardMode) -> Result<FeedEnv> {
        let env = FeedEnv::new(profile.clone(), mode)?;
        Ok(match self.feature_len {
            Some(l) => env.with_feature_len(l),
            None => env,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.base_seed + i).collect()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
