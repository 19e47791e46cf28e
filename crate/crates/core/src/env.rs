//! Two-agent Urban Search-and-Rescue gridworld.
//!
//! The world is a 4 x 5 grid of rooms (x = column, east positive; y = row,
//! south positive, y = 0 is the northernmost row). An engineer clears rubble,
//! a medic rescues victims. Both agents share one observation: every room
//! visited by either agent is visible to both, unvisited rooms look empty.
//!
//! All values are immutable; [`step`] returns a fresh [`WorldState`].

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID_WIDTH: u8 = 4;
pub const GRID_HEIGHT: u8 = 5;
pub const NUM_ROOMS: usize = (GRID_WIDTH as usize) * (GRID_HEIGHT as usize);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("{role} cannot perform {action:?}")]
    RoleViolation { role: Role, action: Action },
    #[error("{role} cannot perform {action:?} in room {at}")]
    IllegalAction {
        role: Role,
        action: Action,
        at: RoomCoord,
    },
}

/// A room on the grid, rendered as `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoomCoord {
    pub x: u8,
    pub y: u8,
}

impl RoomCoord {
    /// Returns `None` when the coordinate lies off the grid.
    pub fn new(x: u8, y: u8) -> Option<Self> {
        (x < GRID_WIDTH && y < GRID_HEIGHT).then_some(Self { x, y })
    }

    /// Row-major room index, `y * 4 + x`.
    pub fn index(self) -> usize {
        self.y as usize * GRID_WIDTH as usize + self.x as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_ROOMS).then(|| Self {
            x: (index % GRID_WIDTH as usize) as u8,
            y: (index / GRID_WIDTH as usize) as u8,
        })
    }

    pub fn all() -> impl Iterator<Item = RoomCoord> {
        (0..NUM_ROOMS).map(|i| RoomCoord::from_index(i).expect("index in range"))
    }

    pub fn manhattan(self, other: RoomCoord) -> u32 {
        (self.x as i32 - other.x as i32).unsigned_abs() + (self.y as i32 - other.y as i32).unsigned_abs()
    }

    /// Neighbouring room in `direction`, or `None` off the grid.
    pub fn neighbor(self, direction: Direction) -> Option<RoomCoord> {
        let (dx, dy) = direction.delta();
        let x = self.x as i32 + dx;
        let y = self.y as i32 + dy;
        if x < 0 || y < 0 {
            return None;
        }
        RoomCoord::new(x as u8, y as u8)
    }
}

impl fmt::Display for RoomCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::South, Direction::East, Direction::West];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::South => (0, 1),
            Direction::East => (1, 0),
            Direction::West => (-1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::South => "south",
            Direction::East => "east",
            Direction::West => "west",
        }
    }

    pub fn action(self) -> Action {
        match self {
            Direction::North => Action::MoveNorth,
            Direction::South => Action::MoveSouth,
            Direction::East => Action::MoveEast,
            Direction::West => Action::MoveWest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Medic,
    Engineer,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Medic, Role::Engineer];

    pub fn name(self) -> &'static str {
        match self {
            Role::Medic => "medic",
            Role::Engineer => "engineer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "medic" => Ok(Role::Medic),
            "engineer" => Ok(Role::Engineer),
            other => Err(format!("unknown role '{other}' (expected medic or engineer)")),
        }
    }
}

/// Agent actions. Declaration order is the tie-break order used by the tree learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveNorth,
    MoveSouth,
    MoveEast,
    MoveWest,
    RemoveRubble,
    RescueVictim,
    NoOp,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; Action::COUNT] = [
        Action::MoveNorth,
        Action::MoveSouth,
        Action::MoveEast,
        Action::MoveWest,
        Action::RemoveRubble,
        Action::RescueVictim,
        Action::NoOp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn direction(self) -> Option<Direction> {
        match self {
            Action::MoveNorth => Some(Direction::North),
            Action::MoveSouth => Some(Direction::South),
            Action::MoveEast => Some(Direction::East),
            Action::MoveWest => Some(Direction::West),
            _ => None,
        }
    }

    /// Whether `role` may ever submit this action.
    pub fn allowed_for(self, role: Role) -> bool {
        match self {
            Action::RemoveRubble => role == Role::Engineer,
            Action::RescueVictim => role == Role::Medic,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimState {
    #[default]
    None,
    Open,
    HiddenUnderRubble,
    Rescued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruthRoom {
    pub has_rubble: bool,
    pub victim: VictimState,
}

impl GroundTruthRoom {
    fn is_consistent(&self) -> bool {
        match self.victim {
            VictimState::HiddenUnderRubble => self.has_rubble,
            VictimState::Open => !self.has_rubble,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_rubble: usize,
    pub n_victims: usize,
    pub hidden_victim_fraction: f64,
    pub horizon: u32,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_rubble: 6,
            n_victims: 4,
            hidden_victim_fraction: 0.5,
            horizon: 200,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Number of victims placed under rubble.
    pub fn hidden_victims(&self) -> usize {
        (self.n_victims as f64 * self.hidden_victim_fraction).round() as usize
    }

    pub fn open_victims(&self) -> usize {
        self.n_victims - self.hidden_victims().min(self.n_victims)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.hidden_victim_fraction) {
            return Err(EnvError::Config(format!(
                "hidden_victim_fraction {} outside [0, 1]",
                self.hidden_victim_fraction
            )));
        }
        if self.horizon == 0 {
            return Err(EnvError::Config("horizon must be at least 1".into()));
        }
        if self.n_rubble > NUM_ROOMS {
            return Err(EnvError::Config(format!(
                "{} rubble rooms requested but the grid has {NUM_ROOMS} rooms",
                self.n_rubble
            )));
        }
        let hidden = self.hidden_victims();
        if hidden > self.n_rubble {
            return Err(EnvError::Config(format!(
                "{hidden} hidden victims need rubble rooms but only {} exist",
                self.n_rubble
            )));
        }
        if self.n_rubble + self.open_victims() > NUM_ROOMS {
            return Err(EnvError::Config(format!(
                "{} rubble rooms and {} open victims do not fit in {NUM_ROOMS} rooms",
                self.n_rubble,
                self.open_victims()
            )));
        }
        Ok(())
    }
}

/// Ground truth of one episode at one timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    /// Row-major, indexed by [`RoomCoord::index`].
    pub rooms: [GroundTruthRoom; NUM_ROOMS],
    pub explored: [bool; NUM_ROOMS],
    pub medic_pos: RoomCoord,
    pub engineer_pos: RoomCoord,
    pub time: u32,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn room(&self, at: RoomCoord) -> &GroundTruthRoom {
        &self.rooms[at.index()]
    }

    pub fn position(&self, role: Role) -> RoomCoord {
        match role {
            Role::Medic => self.medic_pos,
            Role::Engineer => self.engineer_pos,
        }
    }

    pub fn count_victims(&self, state: VictimState) -> usize {
        self.rooms.iter().filter(|r| r.victim == state).count()
    }

    pub fn total_victims(&self) -> usize {
        self.rooms.iter().filter(|r| r.victim != VictimState::None).count()
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|&&e| e).count()
    }

    /// Terminal when every victim is rescued (and there was at least one) or the horizon is reached.
    pub fn is_terminal(&self, horizon: u32) -> bool {
        let total = self.total_victims();
        self.time >= horizon || (total > 0 && self.count_victims(VictimState::Rescued) == total)
    }

    /// Checks the structural invariants: consistent rooms, agents' rooms explored.
    pub fn validate(&self) -> Result<(), EnvError> {
        if let Some((i, _)) = self.rooms.iter().enumerate().find(|(_, r)| !r.is_consistent()) {
            return Err(EnvError::Config(format!(
                "room {} has an inconsistent rubble/victim combination",
                RoomCoord::from_index(i).expect("in range")
            )));
        }
        for at in [self.medic_pos, self.engineer_pos] {
            if RoomCoord::new(at.x, at.y).is_none() {
                return Err(EnvError::Config(format!("agent position {at} is off the grid")));
            }
            if !self.explored[at.index()] {
                return Err(EnvError::Config(format!("agent room {at} is not explored")));
            }
        }
        Ok(())
    }
}

/// Deterministic episode seed derived from a base seed and an episode index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a mixed input
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random initial world. Rubble rooms and open-victim rooms are drawn without
/// replacement; hidden victims go only under rubble; agents start in distinct rooms.
pub fn new_world(config: &EnvConfig) -> Result<WorldState, EnvError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rooms = [GroundTruthRoom::default(); NUM_ROOMS];

    let rubble: Vec<usize> = index::sample(&mut rng, NUM_ROOMS, config.n_rubble).into_vec();
    for &i in &rubble {
        rooms[i].has_rubble = true;
    }
    let hidden = config.hidden_victims();
    for &i in rubble.iter().take(hidden) {
        rooms[i].victim = VictimState::HiddenUnderRubble;
    }
    let free: Vec<usize> = (0..NUM_ROOMS).filter(|i| !rooms[*i].has_rubble).collect();
    for pick in index::sample(&mut rng, free.len(), config.open_victims()) {
        rooms[free[pick]].victim = VictimState::Open;
    }

    let starts = index::sample(&mut rng, NUM_ROOMS, 2).into_vec();
    let medic_pos = RoomCoord::from_index(starts[0]).expect("in range");
    let engineer_pos = RoomCoord::from_index(starts[1]).expect("in range");
    let mut explored = [false; NUM_ROOMS];
    explored[medic_pos.index()] = true;
    explored[engineer_pos.index()] = true;

    Ok(WorldState {
        rooms,
        explored,
        medic_pos,
        engineer_pos,
        time: 0,
        rng_seed: config.seed,
    })
}

fn check_action(world: &WorldState, role: Role, action: Action) -> Result<(), EnvError> {
    if !action.allowed_for(role) {
        return Err(EnvError::RoleViolation { role, action });
    }
    let at = world.position(role);
    let room = world.room(at);
    let legal = match action {
        Action::RemoveRubble => room.has_rubble,
        Action::RescueVictim => room.victim == VictimState::Open,
        Action::NoOp => true,
        mv => at.neighbor(mv.direction().expect("movement")).is_some(),
    };
    if legal {
        Ok(())
    } else {
        Err(EnvError::IllegalAction { role, action, at })
    }
}

fn apply(world: &mut WorldState, role: Role, action: Action) {
    let at = world.position(role);
    match action {
        Action::NoOp => {}
        Action::RemoveRubble => {
            let room = &mut world.rooms[at.index()];
            room.has_rubble = false;
            if room.victim == VictimState::HiddenUnderRubble {
                room.victim = VictimState::Open;
            }
        }
        Action::RescueVictim => world.rooms[at.index()].victim = VictimState::Rescued,
        mv => {
            let dest = at.neighbor(mv.direction().expect("movement")).expect("checked on grid");
            match role {
                Role::Medic => world.medic_pos = dest,
                Role::Engineer => world.engineer_pos = dest,
            }
            world.explored[dest.index()] = true;
        }
    }
}

/// Joint transition. The engineer's action resolves before the medic's.
pub fn step(world: &WorldState, engineer_action: Action, medic_action: Action) -> Result<WorldState, EnvError> {
    check_action(world, Role::Engineer, engineer_action)?;
    let mut next = world.clone();
    apply(&mut next, Role::Engineer, engineer_action);
    check_action(&next, Role::Medic, medic_action)?;
    apply(&mut next, Role::Medic, medic_action);
    next.time += 1;
    Ok(next)
}

/// The shared agent view of the world.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub explored: [bool; NUM_ROOMS],
    pub known_rubble: [bool; NUM_ROOMS],
    pub known_victim: [bool; NUM_ROOMS],
    pub medic_pos: RoomCoord,
    pub engineer_pos: RoomCoord,
}

impl Observation {
    pub fn position(&self, role: Role) -> RoomCoord {
        match role {
            Role::Medic => self.medic_pos,
            Role::Engineer => self.engineer_pos,
        }
    }

    pub fn is_explored(&self, at: RoomCoord) -> bool {
        self.explored[at.index()]
    }

    pub fn has_rubble(&self, at: RoomCoord) -> bool {
        self.known_rubble[at.index()]
    }

    pub fn has_victim(&self, at: RoomCoord) -> bool {
        self.known_victim[at.index()]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for at in RoomCoord::all() {
            let i = at.index();
            if (self.known_rubble[i] || self.known_victim[i]) && !self.explored[i] {
                return Err(EnvError::Config(format!("room {at} has contents but is unexplored")));
            }
            if self.known_rubble[i] && self.known_victim[i] {
                return Err(EnvError::Config(format!("room {at} shows both rubble and a victim")));
            }
        }
        if !self.explored[self.medic_pos.index()] || !self.explored[self.engineer_pos.index()] {
            return Err(EnvError::Config("agent rooms must be explored".into()));
        }
        Ok(())
    }
}

pub fn observe(world: &WorldState) -> Observation {
    let mut known_rubble = [false; NUM_ROOMS];
    let mut known_victim = [false; NUM_ROOMS];
    for (i, room) in world.rooms.iter().enumerate() {
        if world.explored[i] {
            known_rubble[i] = room.has_rubble;
            known_victim[i] = room.victim == VictimState::Open;
        }
    }
    Observation {
        explored: world.explored,
        known_rubble,
        known_victim,
        medic_pos: world.medic_pos,
        engineer_pos: world.engineer_pos,
    }
}

/// Actions available to `role`, in [`Action`] order.
pub fn legal_actions(obs: &Observation, role: Role) -> Vec<Action> {
    let at = obs.position(role);
    Action::ALL
        .into_iter()
        .filter(|&a| match a {
            Action::RemoveRubble => role == Role::Engineer && obs.has_rubble(at),
            Action::RescueVictim => role == Role::Medic && obs.has_victim(at),
            Action::NoOp => true,
            mv => at.neighbor(mv.direction().expect("movement")).is_some(),
        })
        .collect()
}
