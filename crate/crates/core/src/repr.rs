//! Behavior representations and their text rendering.
//!
//! Predicate lines follow a fixed grammar, e.g. `room (2, 2) contains rubble.`
//! or `engineer is not in room (0, 1).`, and every line parses back to the
//! `(feature, branch)` pair it came from.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{legal_actions, Action, Direction, Observation, Role, RoomCoord};
use crate::features::{encode_features, Attribute, FeatureError, FeatureId, FeatureVector};
use crate::rollout::Trajectory;
use crate::tree::{DecisionTree, Node, TreeError};

pub const DEFAULT_STATES_K: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReprError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{role} cannot take {action:?} in room {from}")]
    IllegalAction { role: Role, action: Action, from: RoomCoord },
    #[error("trajectory has {len} steps, need at least {k}")]
    TrajectoryTooShort { len: usize, k: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("cannot parse '{0}'")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub feature: FeatureId,
    pub branch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub steps: Vec<PathStep>,
    pub leaf_action: Action,
    pub role: Role,
}

/// Root-to-leaf path taken by `fv`.
pub fn extract_path(tree: &DecisionTree, fv: &FeatureVector) -> Result<DecisionPath, ReprError> {
    fv.check_schema(tree.feature_schema_version)?;
    let mut steps = Vec::new();
    let mut leaf_action = Action::NoOp;
    for id in tree.trace(fv)? {
        match &tree.nodes[id] {
            Node::Internal { feature, .. } => steps.push(PathStep {
                feature: *feature,
                branch: fv.get(*feature),
            }),
            Node::Leaf { action, .. } => leaf_action = *action,
        }
    }
    Ok(DecisionPath {
        steps,
        leaf_action,
        role: tree.role,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateActionPair {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrKind {
    Path,
    States,
    None,
}

impl BrKind {
    pub const ALL: [BrKind; 3] = [BrKind::Path, BrKind::States, BrKind::None];

    pub fn name(self) -> &'static str {
        match self {
            BrKind::Path => "path",
            BrKind::States => "states",
            BrKind::None => "none",
        }
    }

    /// Column label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            BrKind::Path => "BR (Path)",
            BrKind::States => "BR (States)",
            BrKind::None => "No BR",
        }
    }
}

impl std::fmt::Display for BrKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BrKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "path" => Ok(BrKind::Path),
            "states" => Ok(BrKind::States),
            "none" => Ok(BrKind::None),
            _ => Err(format!("unknown behavior representation '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorRepresentation {
    Path { path: DecisionPath },
    States { pairs: Vec<StateActionPair>, k: usize, role: Role },
    None,
}

impl BehaviorRepresentation {
    pub fn kind(&self) -> BrKind {
        match self {
            BehaviorRepresentation::Path { .. } => BrKind::Path,
            BehaviorRepresentation::States { .. } => BrKind::States,
            BehaviorRepresentation::None => BrKind::None,
        }
    }

    /// Text block placed ahead of the action section, if any.
    pub fn render(&self) -> Result<Option<String>, ReprError> {
        match self {
            BehaviorRepresentation::Path { path } => Ok(Some(render_path(path))),
            BehaviorRepresentation::States { pairs, role, .. } => render_states(pairs, *role).map(Some),
            BehaviorRepresentation::None => Ok(None),
        }
    }
}

/// `k` distinct indices below `len` in increasing order. Requires `k <= len`.
pub fn sample_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, len, k).into_vec();
    picks.sort_unstable();
    picks
}

/// `k` distinct timesteps drawn uniformly from `traj`, returned in time order.
pub fn sample_states_br(traj: &Trajectory, role: Role, k: usize, seed: u64) -> Result<BehaviorRepresentation, ReprError> {
    if k == 0 {
        return Err(ReprError::EmptySample);
    }
    if traj.len() < k {
        return Err(ReprError::TrajectoryTooShort { len: traj.len(), k });
    }
    let pairs = sample_indices(traj.len(), k, seed)
        .into_iter()
        .map(|t| StateActionPair {
            observation: traj.steps[t].observation.clone(),
            action: traj.steps[t].action(role),
        })
        .collect();
    Ok(BehaviorRepresentation::States { pairs, k, role })
}

pub fn render_predicate(feature: FeatureId, branch: bool) -> String {
    let room = feature.room();
    match (feature.attribute(), branch) {
        (Attribute::Explored, true) => format!("room {room} has been explored."),
        (Attribute::Explored, false) => format!("room {room} has not been explored."),
        (Attribute::Rubble, true) => format!("room {room} contains rubble."),
        (Attribute::Rubble, false) => format!("room {room} doesn't contain rubble."),
        (Attribute::Victim, true) => format!("room {room} contains a victim."),
        (Attribute::Victim, false) => format!("room {room} doesn't contain a victim."),
        (Attribute::MedicHere, true) => format!("medic is in room {room}."),
        (Attribute::MedicHere, false) => format!("medic is not in room {room}."),
        (Attribute::EngineerHere, true) => format!("engineer is in room {room}."),
        (Attribute::EngineerHere, false) => format!("engineer is not in room {room}."),
    }
}

/// Splits `"... (x, y)<rest>"` into the prefix, the room and the rest. Accepts `(x,y)` too.
fn split_room(line: &str) -> Option<(&str, RoomCoord, &str)> {
    let open = line.find('(')?;
    let close = open + line[open..].find(')')?;
    let (x, y) = line[open + 1..close].split_once(',')?;
    let x: u8 = x.trim().parse().ok()?;
    let y: u8 = y.trim().parse().ok()?;
    Some((&line[..open], RoomCoord::new(x, y)?, &line[close + 1..]))
}

/// Inverse of [`render_predicate`].
pub fn parse_predicate(line: &str) -> Result<(FeatureId, bool), ReprError> {
    let err = || ReprError::Parse(line.to_string());
    let (prefix, room, rest) = split_room(line.trim()).ok_or_else(err)?;
    let (attribute, branch) = match (prefix, rest) {
        ("room ", " has been explored.") => (Attribute::Explored, true),
        ("room ", " has not been explored.") => (Attribute::Explored, false),
        ("room ", " contains rubble.") => (Attribute::Rubble, true),
        ("room ", " doesn't contain rubble.") => (Attribute::Rubble, false),
        ("room ", " contains a victim.") => (Attribute::Victim, true),
        ("room ", " doesn't contain a victim.") => (Attribute::Victim, false),
        ("medic is in room ", ".") => (Attribute::MedicHere, true),
        ("medic is not in room ", ".") => (Attribute::MedicHere, false),
        ("engineer is in room ", ".") => (Attribute::EngineerHere, true),
        ("engineer is not in room ", ".") => (Attribute::EngineerHere, false),
        _ => return Err(err()),
    };
    Ok((FeatureId::of(room, attribute), branch))
}

pub fn render_path(path: &DecisionPath) -> String {
    let mut out = String::from("Features:");
    for s in &path.steps {
        out.push('\n');
        out.push_str(&render_predicate(s.feature, s.branch));
    }
    out
}

/// Action sentence for `role` standing in `from`. Only checks that the action
/// fits the role and, for moves, stays on the grid.
pub fn render_action(role: Role, from: RoomCoord, action: Action) -> Result<String, ReprError> {
    let illegal = || ReprError::IllegalAction { role, action, from };
    if !action.allowed_for(role) {
        return Err(illegal());
    }
    Ok(match action {
        Action::RemoveRubble => format!("engineer removes rubble in room {from}."),
        Action::RescueVictim => format!("medic rescues the victim in room {from}."),
        Action::NoOp => format!("{role} stays in room {from}."),
        _ => {
            let dir = action.direction().expect("movement action");
            let to = from.neighbor(dir).ok_or_else(illegal)?;
            format!("{role} moves {} to room {to}.", dir.name())
        }
    })
}

/// Same as [`render_action`] but also requires the action to be legal in `obs`.
pub fn render_observed_action(obs: &Observation, role: Role, action: Action) -> Result<String, ReprError> {
    let from = obs.position(role);
    if !legal_actions(obs, role).contains(&action) {
        return Err(ReprError::IllegalAction { role, action, from });
    }
    render_action(role, from, action)
}

/// Parses an action sentence back to `(role, action, room the agent was in)`.
pub fn parse_action_line(line: &str) -> Result<(Role, Action, RoomCoord), ReprError> {
    let err = || ReprError::Parse(line.to_string());
    let line = line.trim();
    let (role_word, tail) = line.split_once(' ').ok_or_else(err)?;
    let role: Role = role_word.parse().map_err(|_| err())?;
    let (prefix, room, rest) = split_room(tail).ok_or_else(err)?;
    if rest != "." {
        return Err(err());
    }
    let parsed = match (role, prefix) {
        (_, "stays in room ") => (role, Action::NoOp, room),
        (Role::Engineer, "removes rubble in room ") => (role, Action::RemoveRubble, room),
        (Role::Medic, "rescues the victim in room ") => (role, Action::RescueVictim, room),
        _ => {
            let dir_word = prefix
                .strip_prefix("moves ")
                .and_then(|p| p.strip_suffix(" to room "))
                .ok_or_else(err)?;
            let dir = Direction::ALL.into_iter().find(|d| d.name() == dir_word).ok_or_else(err)?;
            let (dx, dy) = dir.delta();
            let from = RoomCoord::new((room.x as i32 - dx) as u8, (room.y as i32 - dy) as u8).ok_or_else(err)?;
            (role, dir.action(), from)
        }
    };
    Ok(parsed)
}

/// Full-state text for one observation: agent positions, then every explored
/// room in row-major order with its visible contents.
pub fn render_observation(obs: &Observation) -> String {
    let mut lines = vec![
        format!("medic is in room {}.", obs.medic_pos),
        format!("engineer is in room {}.", obs.engineer_pos),
    ];
    for room in RoomCoord::all().filter(|&r| obs.is_explored(r)) {
        lines.push(format!("room {room} has been explored."));
        if obs.has_rubble(room) {
            lines.push(format!("room {room} contains rubble."));
        }
        if obs.has_victim(room) {
            lines.push(format!("room {room} contains a victim."));
        }
    }
    lines.join("\n")
}

pub fn render_states(pairs: &[StateActionPair], role: Role) -> Result<String, ReprError> {
    let mut blocks = vec![format!("State-action samples of the {role}:")];
    for (i, p) in pairs.iter().enumerate() {
        let action = render_observed_action(&p.observation, role, p.action)?;
        blocks.push(format!(
            "Sample {}:\n{}\nAction: {action}",
            i + 1,
            render_observation(&p.observation)
        ));
    }
    Ok(blocks.join("\n\n"))
}

/// Behavior representation of `role` at `obs` for the requested kind.
pub fn path_br(tree: &DecisionTree, obs: &Observation) -> Result<BehaviorRepresentation, ReprError> {
    Ok(BehaviorRepresentation::Path {
        path: extract_path(tree, &encode_features(obs))?,
    })
}

/// Counts how often each attribute appears in the path.
pub fn attribute_histogram(path: &DecisionPath) -> [usize; 5] {
    let mut h = [0; 5];
    for s in &path.steps {
        h[s.feature.attribute() as usize] += 1;
    }
    h
}
