//! Agent motion models and their analytic Jacobians.
//!
//! Vehicles and cyclists follow the kinematic bicycle model, pedestrians a
//! delta (displacement) model. State ordering everywhere is `(x, y, ψ, v)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::wrap_angle;
use crate::error::{Error, Result};

use super::{Action, AgentState, AgentType};

pub type Mat4 = [[f64; 4]; 4];

/// Integration step and bicycle geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    /// Simulation step in seconds (5 Hz).
    pub dt: f64,
    /// Rear axle distance as a fraction of agent length.
    pub c_r: f64,
    /// Front axle distance as a fraction of agent length.
    pub c_f: f64,
    pub max_accel: f64,
    /// Maximum steering angle in radians.
    pub max_steer: f64,
    /// Maximum pedestrian displacement per step along each axis, metres.
    pub max_ped_step: f64,
    /// Maximum pedestrian heading change per step, radians.
    pub max_ped_turn: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self {
            dt: 0.2,
            c_r: 0.3,
            c_f: 0.3,
            max_accel: 6.0,
            max_steer: 45f64.to_radians(),
            max_ped_step: 0.6,
            max_ped_turn: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl KinematicParams {
    pub fn rear_axle(&self, length: f64) -> f64 {
        self.c_r * length
    }

    pub fn front_axle(&self, length: f64) -> f64 {
        self.c_f * length
    }

    /// Slip angle ρ = atan(l_r / (l_f + l_r) · tan β).
    pub fn slip_angle(&self, length: f64, steer: f64) -> f64 {
        let lr = self.rear_axle(length);
        let lf = self.front_axle(length);
        (lr / (lf + lr) * steer.tan()).atan()
    }

    /// dρ/dβ.
    fn slip_derivative(&self, length: f64, steer: f64) -> f64 {
        let lr = self.rear_axle(length);
        let lf = self.front_axle(length);
        let k = lr / (lf + lr);
        let t = steer.tan();
        let sec2 = 1.0 + t * t;
        k * sec2 / (1.0 + k * k * t * t)
    }
}

fn check_finite(state: &AgentState, values: &[f64]) -> Result<()> {
    if state.pose().iter().all(|x| x.is_finite()) && values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("kinematic step input"))
    }
}

/// One bicycle-model step. Speed is clamped at zero.
pub fn step_bicycle(
    s: &AgentState,
    accel: f64,
    steer: f64,
    p: &KinematicParams,
) -> Result<AgentState> {
    check_finite(s, &[accel, steer])?;
    if s.agent_type == AgentType::Pedestrian {
        return Err(Error::InvalidAgent(
            "bicycle model applied to a pedestrian".into(),
        ));
    }
    let rho = p.slip_angle(s.length, steer);
    let lr = p.rear_axle(s.length);
    let (sin_h, cos_h) = (s.psi + rho).sin_cos();
    let mut next = *s;
    next.x = s.x + s.v * cos_h * p.dt;
    next.y = s.y + s.v * sin_h * p.dt;
    next.psi = wrap_angle(s.psi + s.v / lr * rho.sin() * p.dt);
    next.v = (s.v + accel * p.dt).max(0.0);
    Ok(next)
}

/// Jacobian of the bicycle step with respect to the state, exactly as
/// derived from the unclamped update:
///
/// ```text
/// [1 0 -v sin(ψ+ρ)Δt  cos(ψ+ρ)Δt ]
/// [0 1  v cos(ψ+ρ)Δt  sin(ψ+ρ)Δt ]
/// [0 0  1             sin(ρ)Δt/l_r]
/// [0 0  0             1          ]
/// ```
pub fn jacobian_bicycle(s: &AgentState, steer: f64, p: &KinematicParams) -> Result<Mat4> {
    check_finite(s, &[steer])?;
    let rho = p.slip_angle(s.length, steer);
    let lr = p.rear_axle(s.length);
    let (sin_h, cos_h) = (s.psi + rho).sin_cos();
    let dt = p.dt;
    Ok([
        [1.0, 0.0, -s.v * sin_h * dt, cos_h * dt],
        [0.0, 1.0, s.v * cos_h * dt, sin_h * dt],
        [0.0, 0.0, 1.0, rho.sin() * dt / lr],
        [0.0, 0.0, 0.0, 1.0],
    ])
}

/// Jacobian of the bicycle step with respect to `(α, β)`, 4×2 row-major.
pub fn jacobian_bicycle_action(
    s: &AgentState,
    steer: f64,
    p: &KinematicParams,
) -> Result<[[f64; 2]; 4]> {
    check_finite(s, &[steer])?;
    let rho = p.slip_angle(s.length, steer);
    let drho = p.slip_derivative(s.length, steer);
    let lr = p.rear_axle(s.length);
    let (sin_h, cos_h) = (s.psi + rho).sin_cos();
    let dt = p.dt;
    Ok([
        [0.0, -s.v * sin_h * dt * drho],
        [0.0, s.v * cos_h * dt * drho],
        [0.0, s.v / lr * rho.cos() * dt * drho],
        [dt, 0.0],
    ])
}

/// One delta-model step: displacement and heading change are the action.
pub fn step_delta(s: &AgentState, dx: f64, dy: f64, dpsi: f64, dt: f64) -> Result<AgentState> {
    check_finite(s, &[dx, dy, dpsi, dt])?;
    let mut next = *s;
    next.x = s.x + dx;
    next.y = s.y + dy;
    next.psi = wrap_angle(s.psi + dpsi);
    next.v = ((dx / dt).powi(2) + (dy / dt).powi(2)).sqrt();
    Ok(next)
}

/// Jacobian of the delta step with respect to the state.
pub fn jacobian_delta() -> Mat4 {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ]
}

/// Jacobian of the delta step with respect to `(Δx, Δy, Δψ)`, 4×3 row-major.
pub fn jacobian_delta_action(dx: f64, dy: f64, dt: f64) -> [[f64; 3]; 4] {
    let v = ((dx / dt).powi(2) + (dy / dt).powi(2)).sqrt();
    let (gx, gy) = if v > 0.0 {
        (dx / (dt * dt * v), dy / (dt * dt * v))
    } else {
        (0.0, 0.0)
    };
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [gx, gy, 0.0],
    ]
}

/// Result of stepping one agent, with the Jacobians of the step actually taken
/// (clamping of the action bounds and of the speed included).
#[derive(Clone, Debug)]
pub struct StepLinearization {
    pub next: AgentState,
    /// ∂s'/∂s, 4×4.
    pub d_state: Mat4,
    /// ∂s'/∂a, 4×action_dim row-major.
    pub d_action: Vec<f64>,
    pub action_dim: usize,
}

/// Steps an agent with its type's model, clamping the action to the bounds.
pub fn step_linearized(
    s: &AgentState,
    raw_action: &[f64],
    p: &KinematicParams,
) -> Result<StepLinearization> {
    let action = Action::from_slice(s.agent_type, raw_action)?;
    match action {
        Action::Bicycle { accel, steer } => {
            let (a_c, a_active) = clamp_active(accel, p.max_accel);
            let (b_c, b_active) = clamp_active(steer, p.max_steer);
            let next = step_bicycle(s, a_c, b_c, p)?;
            let mut d_state = jacobian_bicycle(s, b_c, p)?;
            let d_act = jacobian_bicycle_action(s, b_c, p)?;
            let mut d_action = Vec::with_capacity(8);
            for row in d_act {
                d_action.push(if a_active { row[0] } else { 0.0 });
                d_action.push(if b_active { row[1] } else { 0.0 });
            }
            if s.v + a_c * p.dt < 0.0 {
                d_state[3] = [0.0; 4];
                d_action[6] = 0.0;
                d_action[7] = 0.0;
            }
            Ok(StepLinearization {
                next,
                d_state,
                d_action,
                action_dim: 2,
            })
        }
        Action::Delta { dx, dy, dpsi } => {
            let (dx_c, dx_on) = clamp_active(dx, p.max_ped_step);
            let (dy_c, dy_on) = clamp_active(dy, p.max_ped_step);
            let (dp_c, dp_on) = clamp_active(dpsi, p.max_ped_turn);
            let next = step_delta(s, dx_c, dy_c, dp_c, p.dt)?;
            let active = [dx_on, dy_on, dp_on];
            let mut d_action = Vec::with_capacity(12);
            for row in jacobian_delta_action(dx_c, dy_c, p.dt) {
                for (v, on) in row.iter().zip(active) {
                    d_action.push(if on { *v } else { 0.0 });
                }
            }
            Ok(StepLinearization {
                next,
                d_state: jacobian_delta(),
                d_action,
                action_dim: 3,
            })
        }
    }
}

fn clamp_active(x: f64, bound: f64) -> (f64, bool) {
    if x > bound {
        (bound, false)
    } else if x < -bound {
        (-bound, false)
    } else {
        (x, true)
    }
}

/// Recovers the action that moves `s` to `next` under the agent's model.
///
/// For the bicycle model this needs `v > 0` to identify the steering angle;
/// at standstill the steering is reported as zero.
pub fn inverse_step(s: &AgentState, next: &AgentState, p: &KinematicParams) -> Vec<f64> {
    match s.agent_type {
        AgentType::Pedestrian => vec![
            next.x - s.x,
            next.y - s.y,
            wrap_angle(next.psi - s.psi),
        ],
        _ => {
            let accel = (next.v - s.v) / p.dt;
            let steer = if s.v > 1e-9 {
                let lr = p.rear_axle(s.length);
                let lf = p.front_axle(s.length);
                let sin_rho = (wrap_angle(next.psi - s.psi) * lr / (s.v * p.dt)).clamp(-1.0, 1.0);
                let rho = sin_rho.asin();
                (rho.tan() * (lf + lr) / lr).atan()
            } else {
                0.0
            };
            vec![accel, steer]
        }
    }
}
