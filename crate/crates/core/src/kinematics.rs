//! Discrete-time unicycle model.
//!
//! State is `(p_x, p_y, theta)` in the global frame, control is `(v, omega)`.
//! One step is a forward-Euler update:
//!
//! ```text
//! p_x' = p_x + v dt cos(theta)
//! p_y' = p_y + v dt sin(theta)
//! theta' = theta + omega dt
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CmpcError, Result};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub p_x: f64,
    pub p_y: f64,
    pub theta: f64,
}

impl RobotState {
    /// Builds a state with the heading normalized to `(-pi, pi]`.
    pub fn new(p_x: f64, p_y: f64, theta: f64) -> Self {
        Self {
            p_x,
            p_y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.p_x, self.p_y]
    }

    pub fn is_finite(&self) -> bool {
        self.p_x.is_finite() && self.p_y.is_finite() && self.theta.is_finite()
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.p_x - p[0]).hypot(self.p_y - p[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }
}

/// Actuator box limits. Applied controls are clamped to these; the optimizer
/// only sees them as a soft penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            v_min: -0.5,
            v_max: 2.5,
            omega_max: 1.5,
        }
    }
}

impl ControlLimits {
    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            v: u.v.clamp(self.v_min, self.v_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        u.v >= self.v_min && u.v <= self.v_max && u.omega.abs() <= self.omega_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<RobotState>,
    pub controls: Vec<ControlInput>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Drops the first step and repeats the last one, for warm starting the
    /// next receding-horizon cycle.
    pub fn shifted(&self) -> Trajectory {
        let mut states = self.states.clone();
        let mut controls = self.controls.clone();
        if states.len() > 1 {
            states.remove(0);
            let last = *states.last().unwrap();
            states.push(step_unchecked(&last, controls.last().unwrap(), self.dt));
            controls.remove(0);
            controls.push(*controls.last().unwrap());
        }
        Trajectory {
            states,
            controls,
            dt: self.dt,
        }
    }
}

pub(crate) fn step_unchecked(s: &RobotState, u: &ControlInput, dt: f64) -> RobotState {
    RobotState::new(
        s.p_x + u.v * dt * s.theta.cos(),
        s.p_y + u.v * dt * s.theta.sin(),
        s.theta + u.omega * dt,
    )
}

/// One Euler step of the unicycle model.
pub fn step(s: &RobotState, u: &ControlInput, dt: f64) -> Result<RobotState> {
    if !s.is_finite() || !u.is_finite() || !dt.is_finite() {
        return Err(CmpcError::InvalidArgument(
            "non-finite state, control or time step".into(),
        ));
    }
    if dt <= 0.0 {
        return Err(CmpcError::InvalidArgument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    Ok(step_unchecked(s, u, dt))
}

/// Rolls `controls` forward from `s0`. The result has one state per control:
/// `states[0] = s0` and `states[k+1] = step(states[k], controls[k])`, so the
/// last control is not propagated.
pub fn rollout(s0: &RobotState, controls: &[ControlInput], dt: f64) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(CmpcError::InvalidArgument("empty control sequence".into()));
    }
    let mut states = Vec::with_capacity(controls.len());
    let mut s = RobotState::new(s0.p_x, s0.p_y, s0.theta);
    if !s.is_finite() {
        return Err(CmpcError::InvalidArgument("non-finite initial state".into()));
    }
    states.push(s);
    for u in &controls[..controls.len() - 1] {
        s = step(&s, u, dt)?;
        states.push(s);
    }
    if !controls[controls.len() - 1].is_finite() {
        return Err(CmpcError::InvalidArgument("non-finite control".into()));
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        dt,
    })
}
