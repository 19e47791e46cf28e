//! Episode rollouts and the trajectory record stream.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, EnvConfig, EnvError, Observation, Role, WorldState};
use crate::policy::{Goal, Policy};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub time: u32,
    pub world: WorldState,
    pub observation: Observation,
    pub engineer_action: Action,
    pub medic_action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engineer_goal: Option<Goal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medic_goal: Option<Goal>,
}

impl TrajectoryStep {
    pub fn action(&self, role: Role) -> Action {
        match role {
            Role::Medic => self.medic_action,
            Role::Engineer => self.engineer_action,
        }
    }

    pub fn goal(&self, role: Role) -> Option<Goal> {
        match role {
            Role::Medic => self.medic_goal,
            Role::Engineer => self.engineer_goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// World after the last recorded step.
    pub final_world: WorldState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// World following step `t`.
    pub fn world_after(&self, t: usize) -> Option<&WorldState> {
        match t + 1 {
            n if n < self.steps.len() => Some(&self.steps[n].world),
            n if n == self.steps.len() => Some(&self.final_world),
            _ => None,
        }
    }

    /// Checks that consecutive worlds are linked by [`env::step`].
    pub fn validate(&self) -> Result<(), String> {
        for (t, s) in self.steps.iter().enumerate() {
            if s.time != s.world.time || s.time as usize != t + self.steps[0].time as usize {
                return Err(format!("step {t}: time {} out of sequence", s.time));
            }
            if s.observation != env::observe(&s.world) {
                return Err(format!("step {t}: observation does not match world"));
            }
            let next = env::step(&s.world, s.engineer_action, s.medic_action).map_err(|e| format!("step {t}: {e}"))?;
            if Some(&next) != self.world_after(t) {
                return Err(format!("step {t}: successor world does not match"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy '{policy}' emitted an illegal action: {source}")]
    PolicyBug { policy: String, source: EnvError },
}

/// Runs both policies from a fresh world until termination.
pub fn rollout(engineer: &dyn Policy, medic: &dyn Policy, config: &EnvConfig) -> Result<Trajectory, RolloutError> {
    let world = env::new_world(config)?;
    rollout_from(world, engineer, medic, config.horizon)
}

pub fn rollout_from(
    mut world: WorldState,
    engineer: &dyn Policy,
    medic: &dyn Policy,
    horizon: u32,
) -> Result<Trajectory, RolloutError> {
    let mut steps = Vec::new();
    while !world.is_terminal(horizon) {
        let observation = env::observe(&world);
        let engineer_action = engineer.act(&observation, Role::Engineer);
        let medic_action = medic.act(&observation, Role::Medic);
        let next = env::step(&world, engineer_action, medic_action).map_err(|source| {
            let policy = match &source {
                EnvError::RoleViolation { role: Role::Medic, .. } | EnvError::IllegalAction { role: Role::Medic, .. } => {
                    medic.name()
                }
                _ => engineer.name(),
            };
            RolloutError::PolicyBug {
                policy: policy.to_string(),
                source,
            }
        })?;
        steps.push(TrajectoryStep {
            time: world.time,
            engineer_goal: engineer.current_goal(&observation, Role::Engineer),
            medic_goal: medic.current_goal(&observation, Role::Medic),
            world,
            observation,
            engineer_action,
            medic_action,
        });
        world = next;
    }
    Ok(Trajectory {
        steps,
        final_world: world,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum StreamRecord<H> {
    Header { schema_version: u32, header: H },
    Step(Box<TrajectoryStep>),
    End { final_world: Box<WorldState> },
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("unsupported trajectory schema version {0}")]
    Schema(u32),
    #[error("malformed trajectory stream: {0}")]
    Structure(String),
}

/// Writes a header line, one line per timestep and a closing line with the final world.
pub fn write_trajectory<H: Serialize, W: Write>(out: &mut W, header: &H, traj: &Trajectory) -> Result<(), StreamError> {
    let mut line = |rec: &StreamRecord<&H>| -> Result<(), StreamError> {
        serde_json::to_writer(&mut *out, rec).map_err(|source| StreamError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&StreamRecord::Header {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        header,
    })?;
    for s in &traj.steps {
        line(&StreamRecord::Step(Box::new(s.clone())))?;
    }
    line(&StreamRecord::End {
        final_world: Box::new(traj.final_world.clone()),
    })
}

pub fn read_trajectory<H: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<(H, Trajectory), StreamError> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut final_world = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord<H> = serde_json::from_str(&line).map_err(|source| StreamError::Json { line: i + 1, source })?;
        match rec {
            StreamRecord::Header { schema_version, header: h } => {
                if schema_version != TRAJECTORY_SCHEMA_VERSION {
                    return Err(StreamError::Schema(schema_version));
                }
                if header.replace(h).is_some() {
                    return Err(StreamError::Structure("duplicate header".into()));
                }
            }
            StreamRecord::Step(s) => steps.push(*s),
            StreamRecord::End { final_world: w } => final_world = Some(*w),
        }
    }
    let header = header.ok_or_else(|| StreamError::Structure("missing header".into()))?;
    let final_world = final_world.ok_or_else(|| StreamError::Structure("missing end record".into()))?;
    Ok((header, Trajectory { steps, final_world }))
}
