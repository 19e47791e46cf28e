//! Evaluation: state categories, sampling, label scoring and statistics.

mod labels;
mod stats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use labels::{
    hallucination_rates, score_cells, AccuracyReport, AnnotationLabels, CellKey, EvalCell, HallucinationRate,
    HallucinationReport, LabeledItem, Metric, Rate,
};
pub use stats::{hallucination_action_correlation, pearson, PearsonResult, StatsError};

use crate::env::{self, derive_seed, observe, Action, EnvConfig, Observation, Role};
use crate::features::encode_features;
use crate::policy::{Behavior, GoalKind};
use crate::repr::sample_indices;
use crate::rollout::{rollout, RolloutError, Trajectory};
use crate::tree::{DecisionTree, TreeError};

const SAMPLE_STREAM: u64 = 0x5341;
const PICK_STREAM: u64 = 0x5347;
const BATCH: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCategory {
    LongTerm,
    ShortTerm,
    Ambiguous,
}

impl StateCategory {
    pub const ALL: [StateCategory; 3] = [StateCategory::LongTerm, StateCategory::ShortTerm, StateCategory::Ambiguous];

    pub fn label(self) -> &'static str {
        match self {
            StateCategory::LongTerm => "Long-term",
            StateCategory::ShortTerm => "Short-term",
            StateCategory::Ambiguous => "Ambiguous",
        }
    }
}

impl std::str::FromStr for StateCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "longterm" => Ok(StateCategory::LongTerm),
            "shortterm" => Ok(StateCategory::ShortTerm),
            "ambiguous" => Ok(StateCategory::Ambiguous),
            _ => Err(format!("unknown state category '{s}'")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("timestep {t} out of range for a {len}-step trajectory")]
    OutOfRange { t: usize, len: usize },
    #[error("no goal recorded for the {0} at this step")]
    MissingGoal(Role),
    #[error("goal {0:?} has no target room; category undefined")]
    Uncategorizable(GoalKind),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// True when Explore and Exploit agree at `obs` but disagree once the agreed
/// action has been taken.
pub fn is_ambiguous(traj: &Trajectory, t: usize, role: Role) -> Result<bool, EvalError> {
    let step = traj.steps.get(t).ok_or(EvalError::OutOfRange { t, len: traj.len() })?;
    let explore = Behavior::Explore.policy();
    let exploit = Behavior::Exploit.policy();
    let common = explore.act(&step.observation, role);
    if common != exploit.act(&step.observation, role) {
        return Ok(false);
    }
    let other = step.action(other_role(role));
    let next = match role {
        Role::Engineer => env::step(&step.world, common, other)?,
        Role::Medic => env::step(&step.world, other, common)?,
    };
    let obs = observe(&next);
    Ok(explore.act(&obs, role) != exploit.act(&obs, role))
}

fn other_role(role: Role) -> Role {
    match role {
        Role::Medic => Role::Engineer,
        Role::Engineer => Role::Medic,
    }
}

/// Category of the `role`'s decision at step `t`, using the goal recorded in the trajectory.
pub fn categorize_state(traj: &Trajectory, t: usize, role: Role) -> Result<StateCategory, EvalError> {
    let step = traj.steps.get(t).ok_or(EvalError::OutOfRange { t, len: traj.len() })?;
    let goal = step.goal(role).ok_or(EvalError::MissingGoal(role))?;
    let target = goal.target.ok_or(EvalError::Uncategorizable(goal.kind))?;
    if is_ambiguous(traj, t, role)? {
        return Ok(StateCategory::Ambiguous);
    }
    let at = step.observation.position(role);
    let after = step.action(role).direction().and_then(|d| at.neighbor(d)).unwrap_or(at);
    Ok(if after == target {
        StateCategory::ShortTerm
    } else {
        StateCategory::LongTerm
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TreePair<'a> {
    pub medic: &'a DecisionTree,
    pub engineer: &'a DecisionTree,
}

impl TreePair<'_> {
    pub fn get(&self, role: Role) -> &DecisionTree {
        match role {
            Role::Medic => self.medic,
            Role::Engineer => self.engineer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub behavior: Behavior,
    pub category: StateCategory,
    pub n_per_role: usize,
    pub seed: u64,
    /// Maximum number of rollouts to search.
    pub budget_episodes: usize,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalState {
    /// Seed that reproduces the episode under `EnvConfig::with_seed`.
    pub env_seed: u64,
    pub episode: usize,
    pub t: usize,
    pub role: Role,
    pub category: StateCategory,
    pub observation: Observation,
    pub expert_action: Action,
    pub tree_action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub role: Role,
    pub requested: usize,
    pub found: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub states: Vec<EvalState>,
    pub episodes_searched: usize,
    pub shortfall: Vec<Shortfall>,
}

impl SampleOutcome {
    pub fn is_complete(&self) -> bool {
        self.shortfall.is_empty()
    }
}

fn candidates(
    behavior: Behavior,
    category: StateCategory,
    trees: TreePair<'_>,
    env_seed: u64,
    episode: usize,
    env: &EnvConfig,
) -> Result<Vec<EvalState>, EvalError> {
    let p = behavior.policy();
    let traj = rollout(p, p, &env.with_seed(env_seed))?;
    let mut out = Vec::new();
    for (t, s) in traj.steps.iter().enumerate() {
        for role in Role::ALL {
            let cat = match categorize_state(&traj, t, role) {
                Ok(c) => c,
                Err(EvalError::Uncategorizable(_) | EvalError::MissingGoal(_)) => continue,
                Err(e) => return Err(e),
            };
            if cat != category {
                continue;
            }
            let expert_action = s.action(role);
            let tree_action = trees.get(role).predict(&encode_features(&s.observation))?;
            if tree_action != expert_action {
                continue;
            }
            out.push(EvalState {
                env_seed,
                episode,
                t,
                role,
                category: cat,
                observation: s.observation.clone(),
                expert_action,
                tree_action,
            });
        }
    }
    Ok(out)
}

/// Draws `n_per_role` gated states of the requested category for each role.
/// Rollouts are searched in batches until both roles have enough candidates
/// or the budget runs out; the sample is then drawn uniformly from the pool.
pub fn sample_eval_states(req: &SampleRequest, trees: TreePair<'_>) -> Result<SampleOutcome, EvalError> {
    if req.n_per_role == 0 || req.budget_episodes == 0 {
        return Err(EvalError::Invalid("n_per_role and budget_episodes must be at least 1".into()));
    }
    req.env.validate()?;
    let mut pools: [Vec<EvalState>; 2] = [Vec::new(), Vec::new()];
    let mut searched = 0;
    while searched < req.budget_episodes && pools.iter().any(|p| p.len() < req.n_per_role) {
        let end = (searched + BATCH).min(req.budget_episodes);
        let batch: Result<Vec<Vec<EvalState>>, EvalError> = (searched..end)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(req.seed, SAMPLE_STREAM, i as u64);
                candidates(req.behavior, req.category, trees, seed, i, &req.env)
            })
            .collect();
        for s in batch?.into_iter().flatten() {
            pools[role_slot(s.role)].push(s);
        }
        searched = end;
    }
    let mut states = Vec::new();
    let mut shortfall = Vec::new();
    for role in Role::ALL {
        let pool = &pools[role_slot(role)];
        if pool.len() < req.n_per_role {
            shortfall.push(Shortfall {
                role,
                requested: req.n_per_role,
                found: pool.len(),
            });
            states.extend(pool.iter().cloned());
        } else {
            let pick_seed = derive_seed(req.seed, PICK_STREAM, role_slot(role) as u64);
            states.extend(sample_indices(pool.len(), req.n_per_role, pick_seed).into_iter().map(|i| pool[i].clone()));
        }
    }
    Ok(SampleOutcome {
        states,
        episodes_searched: searched,
        shortfall,
    })
}

fn role_slot(role: Role) -> usize {
    match role {
        Role::Medic => 0,
        Role::Engineer => 1,
    }
}
