//! Black-box policy contract and the scripted reference behaviors.
//!
//! All three behaviors are memoryless functions of the shared observation;
//! explored flags carry whatever history they need. Distances are Manhattan
//! and ties between equally near targets go to the smallest `(y, x)`. The first
//! step towards a target closes the east-west gap before the north-south gap.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Direction, Observation, Role, RoomCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    ReachRoom,
    RemoveRubbleAt,
    RescueVictimAt,
    FollowPattern,
    Idle,
}

/// What a policy is currently trying to achieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Goal {
    pub kind: GoalKind,
    pub target: Option<RoomCoord>,
}

impl Goal {
    pub fn reach(target: RoomCoord) -> Self {
        Self {
            kind: GoalKind::ReachRoom,
            target: Some(target),
        }
    }

    pub fn remove_rubble(target: RoomCoord) -> Self {
        Self {
            kind: GoalKind::RemoveRubbleAt,
            target: Some(target),
        }
    }

    pub fn rescue(target: RoomCoord) -> Self {
        Self {
            kind: GoalKind::RescueVictimAt,
            target: Some(target),
        }
    }

    pub fn follow_pattern() -> Self {
        Self {
            kind: GoalKind::FollowPattern,
            target: None,
        }
    }

    pub fn idle() -> Self {
        Self {
            kind: GoalKind::Idle,
            target: None,
        }
    }

    /// Target is present exactly for the targeted kinds.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            GoalKind::FollowPattern | GoalKind::Idle => self.target.is_none(),
            _ => self.target.is_some(),
        }
    }
}

/// A policy observed only through its actions.
///
/// `act` must return an action from [`crate::env::legal_actions`]. Goal
/// introspection is optional; opaque policies return `None`.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    fn act(&self, obs: &Observation, role: Role) -> Action;

    fn current_goal(&self, _obs: &Observation, _role: Role) -> Option<Goal> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Explore,
    Exploit,
    Fixed,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::Explore, Behavior::Exploit, Behavior::Fixed];

    pub fn name(self) -> &'static str {
        match self {
            Behavior::Explore => "explore",
            Behavior::Exploit => "exploit",
            Behavior::Fixed => "fixed",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Behavior::Explore => "Explore",
            Behavior::Exploit => "Exploit",
            Behavior::Fixed => "Fixed",
        }
    }

    pub fn policy(self) -> &'static dyn Policy {
        match self {
            Behavior::Explore => &ExplorePolicy,
            Behavior::Exploit => &ExploitPolicy,
            Behavior::Fixed => &FixedPolicy,
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "explore" => Ok(Behavior::Explore),
            "exploit" => Ok(Behavior::Exploit),
            "fixed" => Ok(Behavior::Fixed),
            other => Err(format!("unknown behavior '{other}' (expected explore, exploit or fixed)")),
        }
    }
}

/// Nearest room satisfying `pred`, ties to smallest `(y, x)`.
pub fn nearest(from: RoomCoord, pred: impl Fn(RoomCoord) -> bool) -> Option<RoomCoord> {
    RoomCoord::all()
        .filter(|&r| pred(r))
        .min_by_key(|&r| (from.manhattan(r), r.y, r.x))
}

/// First move of the shortest path from `from` to `to`; horizontal leg first.
pub fn first_step(from: RoomCoord, to: RoomCoord) -> Option<Direction> {
    use std::cmp::Ordering::*;
    match (to.x.cmp(&from.x), to.y.cmp(&from.y)) {
        (Greater, _) => Some(Direction::East),
        (Less, _) => Some(Direction::West),
        (Equal, Greater) => Some(Direction::South),
        (Equal, Less) => Some(Direction::North),
        (Equal, Equal) => None,
    }
}

fn head_to(from: RoomCoord, to: RoomCoord) -> Action {
    first_step(from, to).map_or(Action::NoOp, Direction::action)
}

/// The role-specific entity: rubble for the engineer, visible victims for the medic.
fn has_task(obs: &Observation, role: Role, at: RoomCoord) -> bool {
    match role {
        Role::Engineer => obs.has_rubble(at),
        Role::Medic => obs.has_victim(at),
    }
}

fn task_action(role: Role) -> Action {
    match role {
        Role::Engineer => Action::RemoveRubble,
        Role::Medic => Action::RescueVictim,
    }
}

fn task_goal(role: Role, at: RoomCoord) -> Goal {
    match role {
        Role::Engineer => Goal::remove_rubble(at),
        Role::Medic => Goal::rescue(at),
    }
}

/// Action realising `goal` from the agent's room.
fn pursue(obs: &Observation, role: Role, goal: Goal) -> Action {
    let at = obs.position(role);
    match (goal.kind, goal.target) {
        (GoalKind::RemoveRubbleAt | GoalKind::RescueVictimAt, Some(t)) if t == at => task_action(role),
        (_, Some(t)) => head_to(at, t),
        (_, None) => Action::NoOp,
    }
}

fn nearest_unexplored(obs: &Observation, role: Role) -> Option<RoomCoord> {
    nearest(obs.position(role), |r| !obs.is_explored(r))
}

fn nearest_task(obs: &Observation, role: Role) -> Option<RoomCoord> {
    nearest(obs.position(role), |r| has_task(obs, role, r))
}

/// Visit every room first, then backtrack to the role's tasks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExplorePolicy;

impl ExplorePolicy {
    pub fn goal(obs: &Observation, role: Role) -> Goal {
        if let Some(room) = nearest_unexplored(obs, role) {
            Goal::reach(room)
        } else if let Some(room) = nearest_task(obs, role) {
            task_goal(role, room)
        } else {
            Goal::idle()
        }
    }
}

impl Policy for ExplorePolicy {
    fn name(&self) -> &str {
        "explore"
    }

    fn act(&self, obs: &Observation, role: Role) -> Action {
        pursue(obs, role, Self::goal(obs, role))
    }

    fn current_goal(&self, obs: &Observation, role: Role) -> Option<Goal> {
        Some(Self::goal(obs, role))
    }
}

/// Handle every visible task immediately; explore only when none is known.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExploitPolicy;

impl ExploitPolicy {
    pub fn goal(obs: &Observation, role: Role) -> Goal {
        if let Some(room) = nearest_task(obs, role) {
            task_goal(role, room)
        } else if let Some(room) = nearest_unexplored(obs, role) {
            Goal::reach(room)
        } else {
            Goal::idle()
        }
    }
}

impl Policy for ExploitPolicy {
    fn name(&self) -> &str {
        "exploit"
    }

    fn act(&self, obs: &Observation, role: Role) -> Action {
        pursue(obs, role, Self::goal(obs, role))
    }

    fn current_goal(&self, obs: &Observation, role: Role) -> Option<Goal> {
        Some(Self::goal(obs, role))
    }
}

/// Position-only north-south sweep that ignores rubble and victims.
///
/// Column 0 is swept south, then columns 1-3 are covered by a serpentine
/// over rows 1-4, and the agent returns west along row 0. The pattern is a
/// closed tour of all 20 rooms, so it repeats indefinitely.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedPolicy;

impl FixedPolicy {
    pub fn direction(at: RoomCoord) -> Direction {
        match (at.x, at.y) {
            (0, 4) => Direction::East,
            (0, _) => Direction::South,
            (1, 0) | (2, 0) | (3, 0) => Direction::West,
            (1, 1) => Direction::East,
            (1, _) => Direction::North,
            (2, 4) => Direction::East,
            (2, _) => Direction::South,
            (_, _) => Direction::North,
        }
    }
}

impl Policy for FixedPolicy {
    fn name(&self) -> &str {
        "fixed"
    }

    fn act(&self, obs: &Observation, role: Role) -> Action {
        Self::direction(obs.position(role)).action()
    }

    fn current_goal(&self, _obs: &Observation, _role: Role) -> Option<Goal> {
        Some(Goal::follow_pattern())
    }
}
