//! Service configuration, loaded from TOML. Every field is optional.

use std::path::Path;

use brex_core::distill::DistillConfig;
use brex_core::env::EnvConfig;
use brex_core::repr::DEFAULT_STATES_K;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Environment used for rollouts and distillation. Overrides `distill.env`.
    pub env: EnvConfig,
    pub distill: DistillConfig,
    /// Episodes used to measure the fidelity of a freshly distilled tree.
    pub fidelity_episodes: usize,
    /// Pairs in a state-sample representation.
    pub states_k: usize,
    /// Rollout budget when sampling evaluation states.
    pub eval_budget: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            distill: DistillConfig::default(),
            fidelity_episodes: 1000,
            states_k: DEFAULT_STATES_K,
            eval_budget: 500,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ApiError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ApiError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ApiError::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            env: self.env,
            ..self.distill
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        self.distill_config()
            .validate()
            .map_err(|e| ApiError::invalid(e.to_string()))?;
        if self.fidelity_episodes == 0 || self.states_k == 0 || self.eval_budget == 0 {
            return Err(ApiError::invalid("fidelity_episodes, states_k and eval_budget must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = ServiceConfig::from_toml("fidelity_episodes = 50\n[env]\nseed = 9\n[distill]\nepisodes_per_iteration = 20\n").unwrap();
        assert_eq!(cfg.fidelity_episodes, 50);
        assert_eq!(cfg.env.seed, 9);
        assert_eq!(cfg.env.n_rubble, EnvConfig::default().n_rubble);
        assert_eq!(cfg.distill.episodes_per_iteration, 20);
        assert_eq!(cfg.distill.iterations, DistillConfig::default().iterations);
        assert_eq!(cfg.distill_config().env.seed, 9);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ServiceConfig::from_toml("bogus = 1").is_err());
        assert!(ServiceConfig::from_toml("[env]\nn_rubble = 21").is_err());
        assert!(ServiceConfig::from_toml("states_k = 0").is_err());
    }
}
