//! The differentiable environment.
//!
//! A [`Scene`] is an immutable snapshot of one scenario at one time step.
//! [`transition`] advances it by one step; [`step_var`] records the same
//! per-agent step on a [`Tape`] through its analytic Jacobians so rollouts are
//! differentiable end to end.

mod kinematics;
mod map;
mod observation;
mod scenario;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kinematics::{
    inverse_step, jacobian_bicycle, jacobian_bicycle_action, jacobian_delta,
    jacobian_delta_action, step_bicycle, step_delta, step_linearized, KinematicParams, Mat4,
    StepLinearization,
};
pub use map::{Lane, LightState, Map, MapSample, Polyline, PolylineKind, TrafficLight};
pub use observation::{
    observe, observe_vars, Observation, ObservationConfig, ObservationVars, AGENT_FEATURES,
    EGO_FEATURES, LIGHT_FEATURES, MAP_FEATURES,
};
pub use scenario::{AgentSpec, Dataset, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of action components under this type's motion model.
    pub fn action_dim(self) -> usize {
        match self {
            AgentType::Pedestrian => 3,
            _ => 2,
        }
    }

    /// Symmetric action bounds, in action-component order.
    pub fn action_bounds(self, p: &KinematicParams) -> Vec<f64> {
        match self {
            AgentType::Pedestrian => vec![p.max_ped_step, p.max_ped_step, p.max_ped_turn],
            _ => vec![p.max_accel, p.max_steer],
        }
    }
}

/// Pose and speed of one agent, plus its static footprint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
    pub agent_type: AgentType,
}

impl AgentState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64, length: f64, width: f64, agent_type: AgentType) -> Self {
        Self {
            x,
            y,
            psi,
            v,
            length,
            width,
            agent_type,
        }
    }

    /// `(x, y, ψ, v)`.
    pub fn pose(&self) -> [f64; 4] {
        [self.x, self.y, self.psi, self.v]
    }

    pub fn with_pose(&self, p: [f64; 4]) -> Self {
        Self {
            x: p[0],
            y: p[1],
            psi: p[2],
            v: p[3],
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::InvalidAgent(format!(
                "extent must be positive, got {}x{}",
                self.length, self.width
            )));
        }
        if !self.pose().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("agent state"));
        }
        if self.agent_type != AgentType::Pedestrian && self.v < 0.0 {
            return Err(Error::InvalidAgent(format!("negative speed {}", self.v)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Bicycle { accel: f64, steer: f64 },
    Delta { dx: f64, dy: f64, dpsi: f64 },
}

impl Action {
    pub fn from_slice(agent_type: AgentType, a: &[f64]) -> Result<Self> {
        match (agent_type, a) {
            (AgentType::Pedestrian, &[dx, dy, dpsi]) => Ok(Action::Delta { dx, dy, dpsi }),
            (AgentType::Vehicle | AgentType::Cyclist, &[accel, steer]) => {
                Ok(Action::Bicycle { accel, steer })
            }
            _ => Err(Error::Shape {
                op: "action",
                detail: format!("{agent_type:?} action has {} components", a.len()),
            }),
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        match self {
            Action::Bicycle { accel, steer } => vec![accel, steer],
            Action::Delta { dx, dy, dpsi } => vec![dx, dy, dpsi],
        }
    }

    /// Clamps each component to the bounds of the motion model.
    pub fn clamped(self, p: &KinematicParams) -> Self {
        match self {
            Action::Bicycle { accel, steer } => Action::Bicycle {
                accel: accel.clamp(-p.max_accel, p.max_accel),
                steer: steer.clamp(-p.max_steer, p.max_steer),
            },
            Action::Delta { dx, dy, dpsi } => Action::Delta {
                dx: dx.clamp(-p.max_ped_step, p.max_ped_step),
                dy: dy.clamp(-p.max_ped_step, p.max_ped_step),
                dpsi: dpsi.clamp(-p.max_ped_turn, p.max_ped_turn),
            },
        }
    }
}

/// Per-step traffic-light states, indexed `[time][light]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvLatent {
    pub schedule: Vec<Vec<LightState>>,
}

impl EnvLatent {
    pub fn at(&self, t: usize) -> &[LightState] {
        &self.schedule[t.min(self.schedule.len().saturating_sub(1))]
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }
}

/// Number of past states kept per agent (the ego history is this plus the current state).
pub const TRAIL_LEN: usize = 5;

/// Global state at one time step.
#[derive(Clone, Debug)]
pub struct Scene {
    pub scenario: Arc<Scenario>,
    pub agents: Vec<AgentState>,
    pub light_states: Vec<LightState>,
    /// Absolute index into the scenario log.
    pub time_step: usize,
    /// Up to [`TRAIL_LEN`] previous states per agent, oldest first.
    pub trails: Vec<Vec<AgentState>>,
}

impl Scene {
    /// The scene at the last initialization step, with the logged history as trail.
    pub fn initial(scenario: Arc<Scenario>) -> Result<Self> {
        scenario.validate()?;
        let t0 = scenario.init_steps - 1;
        let agents = (0..scenario.agents.len())
            .map(|i| scenario.logged_state(i, t0))
            .collect();
        let trails = (0..scenario.agents.len())
            .map(|i| {
                let from = t0.saturating_sub(TRAIL_LEN);
                (from..t0).map(|t| scenario.logged_state(i, t)).collect()
            })
            .collect();
        Ok(Self {
            light_states: scenario.env_latent().at(t0).to_vec(),
            agents,
            time_step: t0,
            trails,
            scenario,
        })
    }

    pub fn map(&self) -> &Map {
        &self.scenario.map
    }

    /// Steps elapsed since the initial scene.
    pub fn elapsed(&self) -> usize {
        self.time_step + 1 - self.scenario.init_steps
    }

    pub fn controlled(&self, i: usize) -> bool {
        self.scenario.agents[i].controlled
    }

    pub fn validate(&self, env: &EnvLatent) -> Result<()> {
        for a in &self.agents {
            a.validate()?;
        }
        let needed = self.scenario.init_steps + self.scenario.horizon;
        if env.len() < needed {
            return Err(Error::Horizon {
                needed,
                have: env.len(),
            });
        }
        self.scenario.map.validate()
    }

    /// Scene at the next step given the states of every agent.
    pub fn advanced(&self, next_agents: Vec<AgentState>, env: &EnvLatent) -> Scene {
        let trails = self
            .trails
            .iter()
            .zip(&self.agents)
            .map(|(trail, cur)| {
                let mut t = trail.clone();
                t.push(*cur);
                if t.len() > TRAIL_LEN {
                    t.remove(0);
                }
                t
            })
            .collect();
        Scene {
            scenario: Arc::clone(&self.scenario),
            agents: next_agents,
            light_states: env.at(self.time_step + 1).to_vec(),
            time_step: self.time_step + 1,
            trails,
        }
    }
}

/// Advances the scene by one step.
///
/// Controlled agents are stepped by their motion model with their action
/// (clamped to the bounds); replayed agents take the next logged state.
pub fn transition(
    scene: &Scene,
    actions: &[Option<Vec<f64>>],
    env: &EnvLatent,
    p: &KinematicParams,
) -> Result<Scene> {
    let mut next = Vec::with_capacity(scene.agents.len());
    for (i, s) in scene.agents.iter().enumerate() {
        if scene.controlled(i) {
            let a = actions
                .get(i)
                .and_then(|a| a.as_ref())
                .ok_or(Error::MissingAction(i))?;
            next.push(step_linearized(s, a, p)?.next);
        } else {
            next.push(scene.scenario.logged_state(i, scene.time_step + 1));
        }
    }
    Ok(scene.advanced(next, env))
}

/// Records one agent step on the tape. `state` is a `[4]` variable and
/// `action` a variable of the agent type's action dimension.
pub fn step_var(
    tape: &mut Tape,
    agent: &AgentState,
    state: Var,
    action: Var,
    p: &KinematicParams,
) -> Result<(Var, StepLinearization)> {
    let pose = tape.value(state).data().to_vec();
    let s = agent.with_pose([pose[0], pose[1], pose[2], pose[3]]);
    let a = tape.value(action).data().to_vec();
    let lin = step_linearized(&s, &a, p)?;
    let k = lin.action_dim;
    let mut jac = Vec::with_capacity(4 * (4 + k));
    for r in 0..4 {
        jac.extend_from_slice(&lin.d_state[r]);
        jac.extend_from_slice(&lin.d_action[r * k..(r + 1) * k]);
    }
    let out = tape.jacobian_op(
        &[state, action],
        Tensor::vector(lin.next.pose().to_vec()),
        jac,
    )?;
    Ok((out, lin))
}

/// Draws a scenario uniformly and returns its initial scene and light schedule.
pub fn sample_initial<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<(Scene, EnvLatent)> {
    if dataset.scenarios.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx = rng.gen_range(0..dataset.scenarios.len());
    let scenario = Arc::clone(&dataset.scenarios[idx]);
    let env = scenario.env_latent();
    let scene = Scene::initial(scenario)?;
    scene.validate(&env)?;
    Ok((scene, env))
}
