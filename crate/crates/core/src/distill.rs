//! DAgger distillation of a black-box policy into a [`DecisionTree`].
//!
//! Iteration 1 rolls out the expert pair and records the expert's action at
//! every state (behavior cloning). Later iterations let the current tree drive
//! its role, the other agent stays on the expert, and every visited state is
//! relabelled with the expert's action. The aggregated dataset is refit after
//! each iteration and the iterate with the best hold-out fidelity is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{derive_seed, legal_actions, Action, EnvConfig, Observation, Role};
use crate::features::encode_features;
use crate::policy::Policy;
use crate::rollout::{rollout, RolloutError};
use crate::tree::{fit_tree, Dataset, DecisionTree, FitParams, TreeError};

const EVAL_STREAM: u64 = 0;
const HOLDOUT_STREAM: u64 = 0x4844;
const TRAIN_STREAM: u64 = 0x5452;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Episodes used to pick the best iterate.
    pub holdout_episodes: usize,
    pub env: EnvConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            episodes_per_iteration: 500,
            max_depth: 32,
            min_samples_leaf: 2,
            holdout_episodes: 200,
            env: EnvConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.iterations == 0 {
            return Err(DistillError::Config("iterations must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(DistillError::Config("max_depth must be at least 1".into()));
        }
        if self.episodes_per_iteration == 0 || self.holdout_episodes == 0 {
            return Err(DistillError::Config("episode counts must be at least 1".into()));
        }
        self.env.validate().map_err(|e| DistillError::Config(e.to_string()))
    }

    pub fn fit_params(&self) -> FitParams {
        FitParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
        }
    }
}

/// A tree acting as a policy for its own role. Illegal predictions fall back to `NoOp`.
#[derive(Debug, Clone)]
pub struct TreePolicy<'a> {
    pub tree: &'a DecisionTree,
}

impl Policy for TreePolicy<'_> {
    fn name(&self) -> &str {
        "tree"
    }

    fn act(&self, obs: &Observation, role: Role) -> Action {
        let predicted = self.tree.predict(&encode_features(obs)).unwrap_or(Action::NoOp);
        if legal_actions(obs, role).contains(&predicted) {
            predicted
        } else {
            Action::NoOp
        }
    }
}

/// Runs `role` under `learner` and the other agent under `expert`.
struct Mixed<'a> {
    learner: &'a dyn Policy,
    expert: &'a dyn Policy,
    role: Role,
}

impl Policy for Mixed<'_> {
    fn name(&self) -> &str {
        "dagger-mixture"
    }

    fn act(&self, obs: &Observation, role: Role) -> Action {
        if role == self.role {
            self.learner.act(obs, role)
        } else {
            self.expert.act(obs, role)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityCount {
    pub matches: u64,
    pub total: u64,
}

impl FidelityCount {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matches as f64 / self.total as f64
        }
    }
}

fn fidelity_over(
    tree: &DecisionTree,
    expert: &dyn Policy,
    role: Role,
    env: &EnvConfig,
    stream: u64,
    episodes: usize,
) -> Result<FidelityCount, DistillError> {
    let per_episode: Result<Vec<FidelityCount>, DistillError> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let cfg = env.with_seed(derive_seed(env.seed, stream, i as u64));
            let traj = rollout(expert, expert, &cfg)?;
            let mut c = FidelityCount { matches: 0, total: 0 };
            for s in &traj.steps {
                c.total += 1;
                if tree.predict(&encode_features(&s.observation))? == s.action(role) {
                    c.matches += 1;
                }
            }
            Ok(c)
        })
        .collect();
    Ok(per_episode?.into_iter().fold(FidelityCount { matches: 0, total: 0 }, |a, b| FidelityCount {
        matches: a.matches + b.matches,
        total: a.total + b.total,
    }))
}

/// Action-match counts of `tree` against the expert over expert-pair rollouts.
pub fn eval_fidelity_counts(
    tree: &DecisionTree,
    expert: &dyn Policy,
    role: Role,
    episodes: usize,
    env: &EnvConfig,
) -> Result<FidelityCount, DistillError> {
    if episodes == 0 {
        return Err(DistillError::Config("episodes must be at least 1".into()));
    }
    fidelity_over(tree, expert, role, env, EVAL_STREAM, episodes)
}

pub fn eval_fidelity(
    tree: &DecisionTree,
    expert: &dyn Policy,
    role: Role,
    episodes: usize,
    env: &EnvConfig,
) -> Result<f64, DistillError> {
    Ok(eval_fidelity_counts(tree, expert, role, episodes, env)?.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub dataset_size: usize,
    pub holdout_fidelity: f64,
    pub depth: usize,
    pub leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distillation {
    pub tree: DecisionTree,
    pub best_iteration: usize,
    pub iterations: Vec<IterationReport>,
}

fn collect(
    data: &mut Dataset,
    driver: &dyn Policy,
    expert: &dyn Policy,
    role: Role,
    cfg: &DistillConfig,
    iteration: usize,
) -> Result<(), DistillError> {
    let trajectories: Result<Vec<_>, RolloutError> = (0..cfg.episodes_per_iteration)
        .into_par_iter()
        .map(|j| {
            let seed = derive_seed(cfg.env.seed, TRAIN_STREAM + iteration as u64, j as u64);
            rollout(driver, driver, &cfg.env.with_seed(seed))
        })
        .collect();
    for traj in trajectories? {
        for s in &traj.steps {
            data.push(encode_features(&s.observation), expert.act(&s.observation, role));
        }
    }
    Ok(())
}

/// DAgger with a pure-expert first iteration and pure-learner rollouts afterwards.
pub fn dagger_distill(expert: &dyn Policy, role: Role, cfg: &DistillConfig) -> Result<Distillation, DistillError> {
    cfg.validate()?;
    let mut data = Dataset::new(role);
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(DecisionTree, usize, f64)> = None;
    let mut current: Option<DecisionTree> = None;

    for iteration in 1..=cfg.iterations {
        match &current {
            None => collect(&mut data, expert, expert, role, cfg, iteration)?,
            Some(tree) => {
                let learner = TreePolicy { tree };
                let driver = Mixed {
                    learner: &learner,
                    expert,
                    role,
                };
                collect(&mut data, &driver, expert, role, cfg, iteration)?;
            }
        }
        let tree = fit_tree(&data, cfg.fit_params())?;
        let holdout = fidelity_over(&tree, expert, role, &cfg.env, HOLDOUT_STREAM, cfg.holdout_episodes)?.accuracy();
        reports.push(IterationReport {
            iteration,
            dataset_size: data.len(),
            holdout_fidelity: holdout,
            depth: tree.depth(),
            leaves: tree.leaf_count(),
        });
        if best.as_ref().is_none_or(|(_, _, f)| holdout > *f) {
            best = Some((tree.clone(), iteration, holdout));
        }
        current = Some(tree);
    }
    let (tree, best_iteration, _) = best.expect("at least one iteration");
    Ok(Distillation {
        tree,
        best_iteration,
        iterations: reports,
    })
}
