//! Per-branch optimization problem.
//!
//! Each branch minimizes the tracking cost subject to the kinematic model,
//! obstacle clearance and the risk boundaries of its own hypothesis, with the
//! first `N_c` steps tied to a shared consensus segment. Constraints enter
//! through an augmented Lagrangian:
//!
//! ```text
//! L = J + lam_obs.g_obs + rho_obs |1[g_obs > 0] g_obs|^2
//!       + lam_risk.g_risk + rho_risk |1[g_risk > 0] g_risk|^2
//!       + lam_kin.h + rho_kin |h|^2
//!       + lam_cons.(x - x~) + rho_cons |x - x~|^2
//! ```
//!
//! The decision variables are the controls `u(0..N)` and the states
//! `s(1..N)`; `s(0)` is the measured state. Inequality rows at `k = 0` are
//! constants and are left out.

use serde::{Deserialize, Serialize};

use crate::band::BandMatrix;
use crate::error::{CmpcError, Result};
use crate::geometry::{Obstacle, RiskRegion, RiskRegionConfig};
use crate::kinematics::{wrap_angle, ControlInput, ControlLimits, RobotState, Trajectory};

/// Half-bandwidth of the Hessian in the interleaved variable layout.
pub const HESSIAN_BANDWIDTH: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_acc: f64,
    pub w_vel: f64,
    pub w_guide: f64,
    pub v_ref: f64,
    pub guide_point: [f64; 2],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_acc: 1.8,
            w_vel: 5.0,
            w_guide: 3.5,
            v_ref: 1.8,
            guide_point: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub obs: f64,
    pub risk: f64,
    pub kin: f64,
    pub cons: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            obs: 1.0,
            risk: 1.0,
            kin: 1.0,
            cons: 1.0,
        }
    }
}

/// Multipliers of one branch. Inequality duals are indexed
/// `[(k - 1) * count + j]` for steps `k = 1..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub obs: Vec<f64>,
    pub risk: Vec<f64>,
    pub kin: Vec<[f64; 3]>,
    pub cons: Vec<[f64; 5]>,
}

impl Duals {
    pub fn zeros(horizon: usize, n_obs: usize, n_risk: usize, consensus_len: usize) -> Self {
        let rows = horizon.saturating_sub(1);
        Self {
            obs: vec![0.0; rows * n_obs],
            risk: vec![0.0; rows * n_risk],
            kin: vec![[0.0; 3]; rows],
            cons: vec![[0.0; 5]; consensus_len],
        }
    }
}

/// Shared prefix of all branches: states and controls over the first `N_c`
/// steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub states: Vec<RobotState>,
    pub controls: Vec<ControlInput>,
}

impl ConsensusState {
    pub fn empty() -> Self {
        Self {
            states: Vec::new(),
            controls: Vec::new(),
        }
    }

    pub fn from_prefix(tr: &Trajectory, len: usize) -> Self {
        Self {
            states: tr.states[..len].to_vec(),
            controls: tr.controls[..len].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Stacked `(p_x, p_y, theta, v, omega)` at step `k`.
    pub fn stacked(&self, k: usize) -> [f64; 5] {
        stacked(&self.states[k], &self.controls[k])
    }
}

pub(crate) fn stacked(s: &RobotState, u: &ControlInput) -> [f64; 5] {
    [s.p_x, s.p_y, s.theta, u.v, u.omega]
}

/// Difference of stacked vectors with the heading component wrapped.
pub(crate) fn stacked_diff(a: [f64; 5], b: [f64; 5]) -> [f64; 5] {
    [a[0] - b[0], a[1] - b[1], wrap_angle(a[2] - b[2]), a[3] - b[3], a[4] - b[4]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchProblem {
    pub initial_state: RobotState,
    /// Control applied in the previous cycle; anchors the first
    /// acceleration term.
    pub prev_control: ControlInput,
    pub config: RiskRegionConfig,
    /// Visible obstacles at planning time, predicted at constant velocity.
    pub obstacles: Vec<Obstacle>,
    pub weights: CostWeights,
    pub horizon: usize,
    pub dt: f64,
    pub consensus_len: usize,
    pub duals: Duals,
    pub penalties: Penalties,
    pub limits: ControlLimits,
    /// Weight of the quadratic penalty on controls outside `limits`.
    pub limit_weight: f64,
}

impl BranchProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        initial_state: RobotState,
        prev_control: ControlInput,
        config: RiskRegionConfig,
        obstacles: Vec<Obstacle>,
        weights: CostWeights,
        horizon: usize,
        dt: f64,
        consensus_len: usize,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(CmpcError::InvalidArgument(format!("horizon {horizon} < 2")));
        }
        if consensus_len > horizon {
            return Err(CmpcError::InvalidArgument(format!(
                "consensus length {consensus_len} exceeds horizon {horizon}"
            )));
        }
        if !(dt > 0.0) {
            return Err(CmpcError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let duals = Duals::zeros(horizon, obstacles.len(), config.regions.len(), consensus_len);
        Ok(Self {
            initial_state,
            prev_control,
            config,
            obstacles,
            weights,
            horizon,
            dt,
            consensus_len,
            duals,
            penalties: Penalties::default(),
            limits: ControlLimits::default(),
            limit_weight: 10.0 * weights.w_acc,
        })
    }

    pub fn regions(&self) -> &[RiskRegion] {
        &self.config.regions
    }

    pub fn num_vars(&self) -> usize {
        5 * self.horizon - 3
    }

    pub(crate) fn check_shapes(&self, tr: &Trajectory, cons: &ConsensusState) -> Result<()> {
        let n = self.horizon;
        let rows = n - 1;
        let d = &self.duals;
        if tr.states.len() != n || tr.controls.len() != n {
            return Err(CmpcError::InvalidArgument(format!(
                "trajectory has {} states / {} controls, horizon is {n}",
                tr.states.len(),
                tr.controls.len()
            )));
        }
        if cons.states.len() != self.consensus_len || cons.controls.len() != self.consensus_len {
            return Err(CmpcError::InvalidArgument(format!(
                "consensus length {} does not match {}",
                cons.states.len(),
                self.consensus_len
            )));
        }
        if d.obs.len() != rows * self.obstacles.len()
            || d.risk.len() != rows * self.config.regions.len()
            || d.kin.len() != rows
            || d.cons.len() != self.consensus_len
        {
            return Err(CmpcError::InvalidArgument("dual shapes do not match constraints".into()));
        }
        Ok(())
    }
}

/// Index of `v_k` in the decision vector; `omega_k` follows it.
pub fn control_index(k: usize) -> usize {
    5 * k
}

/// Index of `p_x` of `s_k` in the decision vector, `None` for the fixed
/// initial state.
pub fn state_index(k: usize) -> Option<usize> {
    if k == 0 {
        None
    } else {
        Some(5 * k - 3)
    }
}

pub fn pack(tr: &Trajectory) -> Vec<f64> {
    let n = tr.states.len();
    let mut z = vec![0.0; 5 * n - 3];
    for k in 0..n {
        let c = control_index(k);
        z[c] = tr.controls[k].v;
        z[c + 1] = tr.controls[k].omega;
        if let Some(i) = state_index(k) {
            z[i] = tr.states[k].p_x;
            z[i + 1] = tr.states[k].p_y;
            z[i + 2] = tr.states[k].theta;
        }
    }
    z
}

/// Inverse of [`pack`]. Headings are left unwrapped; call
/// [`normalize_headings`] once the iterate is final.
pub fn unpack(z: &[f64], s0: &RobotState, dt: f64) -> Trajectory {
    let n = (z.len() + 3) / 5;
    let mut states = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    states.push(*s0);
    for k in 0..n {
        let c = control_index(k);
        controls.push(ControlInput::new(z[c], z[c + 1]));
        if let Some(i) = state_index(k) {
            states.push(RobotState {
                p_x: z[i],
                p_y: z[i + 1],
                theta: z[i + 2],
            });
        }
    }
    Trajectory { states, controls, dt }
}

pub fn normalize_headings(tr: &mut Trajectory) {
    for s in &mut tr.states {
        s.theta = wrap_angle(s.theta);
    }
}

/// Tracking cost: acceleration, velocity error and terminal guidance terms.
pub fn cost(tr: &Trajectory, w: &CostWeights, prev: &ControlInput) -> f64 {
    let dt = tr.dt;
    let mut total = 0.0;
    let mut last = *prev;
    for u in &tr.controls {
        let av = (u.v - last.v) / dt;
        let aw = (u.omega - last.omega) / dt;
        total += w.w_acc * (av * av + aw * aw);
        total += w.w_vel * (u.v - w.v_ref).powi(2);
        last = *u;
    }
    let end = tr.states[tr.states.len() - 1];
    total + w.w_guide * ((end.p_x - w.guide_point[0]).powi(2) + (end.p_y - w.guide_point[1]).powi(2))
}

fn circle_violation(s: &RobotState, c: [f64; 2], r: f64) -> f64 {
    r * r - ((s.p_x - c[0]).powi(2) + (s.p_y - c[1]).powi(2))
}

/// Obstacle clearance `r^2 - |p_k - o_k|^2` per step and obstacle, with
/// obstacles advanced at constant velocity. Non-positive means satisfied.
pub fn g_obs(tr: &Trajectory, obstacles: &[Obstacle]) -> Vec<Vec<f64>> {
    tr.states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let t = k as f64 * tr.dt;
            obstacles
                .iter()
                .map(|o| circle_violation(s, o.predict(t), o.radius))
                .collect()
        })
        .collect()
}

/// Risk boundary `r_risk^2 - |p_k - c|^2` per step and region.
pub fn g_risk(tr: &Trajectory, config: &RiskRegionConfig) -> Vec<Vec<f64>> {
    tr.states
        .iter()
        .map(|s| {
            config
                .regions
                .iter()
                .map(|r| circle_violation(s, r.center, r.radius))
                .collect()
        })
        .collect()
}

fn kin_residual(s: &RobotState, u: &ControlInput, next: &RobotState, dt: f64) -> [f64; 3] {
    let (sn, cs) = s.theta.sin_cos();
    [
        next.p_x - s.p_x - u.v * dt * cs,
        next.p_y - s.p_y - u.v * dt * sn,
        wrap_angle(next.theta - s.theta - u.omega * dt),
    ]
}

/// Kinematic residuals `s(k+1) - f(s(k), u(k))` for `k = 0..N-1`.
pub fn h_kin(tr: &Trajectory) -> Vec<[f64; 3]> {
    tr.states
        .windows(2)
        .zip(&tr.controls)
        .map(|(w, u)| kin_residual(&w[0], u, &w[1], tr.dt))
        .collect()
}

/// Value of the augmented Lagrangian, without the control-limit penalty.
pub fn augmented_lagrangian(p: &BranchProblem, tr: &Trajectory, cons: &ConsensusState) -> Result<f64> {
    p.check_shapes(tr, cons)?;
    Ok(Terms::compute(p, tr, cons, PenaltyRule::Violated, None).lagrangian)
}

/// Which inequality rows carry the quadratic penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyRule {
    /// Only rows with `g > 0`; this is the function whose gradient the
    /// termination test measures.
    Violated,
    /// Rows with `g > 0` or `lambda > 0`. Agrees with `Violated` in value
    /// and gradient wherever complementary slackness holds, but stays
    /// bounded below when a priced row is slack: with `g = r^2 - d^2`
    /// the term `lambda g` alone has curvature `-2 lambda`.
    #[default]
    ViolatedOrPriced,
}

/// Quadratic penalty on controls outside the actuator box.
pub fn limit_penalty(p: &BranchProblem, tr: &Trajectory) -> f64 {
    tr.controls
        .iter()
        .map(|u| {
            let ev = (u.v - p.limits.v_max).max(0.0) + (p.limits.v_min - u.v).max(0.0);
            let ew = (u.omega.abs() - p.limits.omega_max).max(0.0);
            p.limit_weight * (ev * ev + ew * ew)
        })
        .sum()
}

/// Objective, gradient and Gauss-Newton Hessian of one branch.
pub struct Evaluation {
    pub value: f64,
    pub lagrangian: f64,
    pub gradient: Vec<f64>,
    pub hessian: Option<BandMatrix>,
}

/// Objective minimized by the inner solver: augmented Lagrangian plus the
/// control-limit penalty.
pub fn objective(p: &BranchProblem, tr: &Trajectory, cons: &ConsensusState) -> f64 {
    objective_with(p, tr, cons, PenaltyRule::Violated)
}

pub fn objective_with(p: &BranchProblem, tr: &Trajectory, cons: &ConsensusState, rule: PenaltyRule) -> f64 {
    Terms::compute(p, tr, cons, rule, None).lagrangian + limit_penalty(p, tr)
}

/// Full evaluation with gradient (w.r.t. the packed decision vector) and,
/// optionally, the banded Hessian model.
pub fn evaluate(p: &BranchProblem, tr: &Trajectory, cons: &ConsensusState, hessian: bool) -> Evaluation {
    evaluate_with(p, tr, cons, hessian, PenaltyRule::Violated)
}

pub fn evaluate_with(
    p: &BranchProblem,
    tr: &Trajectory,
    cons: &ConsensusState,
    hessian: bool,
    rule: PenaltyRule,
) -> Evaluation {
    let mut acc = Accum::new(p.num_vars(), hessian);
    let terms = Terms::compute(p, tr, cons, rule, Some(&mut acc));
    let limits = limit_terms(p, tr, &mut acc);
    Evaluation {
        value: terms.lagrangian + limits,
        lagrangian: terms.lagrangian,
        gradient: acc.grad,
        hessian: acc.hess,
    }
}

struct Accum {
    grad: Vec<f64>,
    hess: Option<BandMatrix>,
}

impl Accum {
    fn new(n: usize, hessian: bool) -> Self {
        Self {
            grad: vec![0.0; n],
            hess: hessian.then(|| BandMatrix::zeros(n, HESSIAN_BANDWIDTH)),
        }
    }

    fn g(&mut self, i: Option<usize>, v: f64) {
        if let Some(i) = i {
            self.grad[i] += v;
        }
    }

    fn h(&mut self, i: Option<usize>, j: Option<usize>, v: f64) {
        if let (Some(h), Some(i), Some(j)) = (self.hess.as_mut(), i, j) {
            h.add(i, j, v);
        }
    }

    /// Adds `scale * a a^T` for a sparse vector `a`.
    fn outer(&mut self, a: &[(Option<usize>, f64)], scale: f64) {
        if self.hess.is_none() {
            return;
        }
        for (x, &(i, ai)) in a.iter().enumerate() {
            for &(j, aj) in &a[..=x] {
                self.h(i, j, scale * ai * aj);
            }
        }
    }
}

struct Terms {
    lagrangian: f64,
}

fn sidx(k: usize, c: usize) -> Option<usize> {
    state_index(k).map(|i| i + c)
}

fn cidx(k: usize, c: usize) -> Option<usize> {
    Some(control_index(k) + c)
}

impl Terms {
    fn compute(
        p: &BranchProblem,
        tr: &Trajectory,
        cons: &ConsensusState,
        rule: PenaltyRule,
        mut acc: Option<&mut Accum>,
    ) -> Terms {
        let n = p.horizon;
        let dt = p.dt;
        let w = &p.weights;
        let mut total = 0.0;

        // tracking cost
        let mut last = p.prev_control;
        let ka = 2.0 * w.w_acc / (dt * dt);
        for k in 0..n {
            let u = tr.controls[k];
            let av = (u.v - last.v) / dt;
            let aw = (u.omega - last.omega) / dt;
            let ev = u.v - w.v_ref;
            total += w.w_acc * (av * av + aw * aw) + w.w_vel * ev * ev;
            if let Some(a) = acc.as_deref_mut() {
                let gv = 2.0 * w.w_acc * av / dt;
                let gw = 2.0 * w.w_acc * aw / dt;
                a.g(cidx(k, 0), gv + 2.0 * w.w_vel * ev);
                a.g(cidx(k, 1), gw);
                a.h(cidx(k, 0), cidx(k, 0), ka + 2.0 * w.w_vel);
                a.h(cidx(k, 1), cidx(k, 1), ka);
                if k > 0 {
                    a.g(cidx(k - 1, 0), -gv);
                    a.g(cidx(k - 1, 1), -gw);
                    a.h(cidx(k - 1, 0), cidx(k - 1, 0), ka);
                    a.h(cidx(k - 1, 1), cidx(k - 1, 1), ka);
                    a.h(cidx(k - 1, 0), cidx(k, 0), -ka);
                    a.h(cidx(k - 1, 1), cidx(k, 1), -ka);
                }
            }
            last = u;
        }
        let end = tr.states[n - 1];
        let ex = end.p_x - w.guide_point[0];
        let ey = end.p_y - w.guide_point[1];
        total += w.w_guide * (ex * ex + ey * ey);
        if let Some(a) = acc.as_deref_mut() {
            a.g(sidx(n - 1, 0), 2.0 * w.w_guide * ex);
            a.g(sidx(n - 1, 1), 2.0 * w.w_guide * ey);
            a.h(sidx(n - 1, 0), sidx(n - 1, 0), 2.0 * w.w_guide);
            a.h(sidx(n - 1, 1), sidx(n - 1, 1), 2.0 * w.w_guide);
        }

        // inequality families
        let n_obs = p.obstacles.len();
        for k in 1..n {
            let s = tr.states[k];
            let t = k as f64 * dt;
            for (j, o) in p.obstacles.iter().enumerate() {
                let c = o.predict(t);
                let lam = p.duals.obs[(k - 1) * n_obs + j];
                total += inequality_term(&s, k, c, o.radius, lam, p.penalties.obs, rule, acc.as_deref_mut());
            }
        }
        let regions = p.regions();
        let n_risk = regions.len();
        for k in 1..n {
            let s = tr.states[k];
            for (j, r) in regions.iter().enumerate() {
                let lam = p.duals.risk[(k - 1) * n_risk + j];
                total += inequality_term(&s, k, r.center, r.radius, lam, p.penalties.risk, rule, acc.as_deref_mut());
            }
        }

        // kinematics
        let rho = p.penalties.kin;
        for k in 0..n - 1 {
            let s = tr.states[k];
            let u = tr.controls[k];
            let h = kin_residual(&s, &u, &tr.states[k + 1], dt);
            let lam = p.duals.kin[k];
            for c in 0..3 {
                total += lam[c] * h[c] + rho * h[c] * h[c];
            }
            if let Some(a) = acc.as_deref_mut() {
                let (sn, cs) = s.theta.sin_cos();
                let m = [
                    lam[0] + 2.0 * rho * h[0],
                    lam[1] + 2.0 * rho * h[1],
                    lam[2] + 2.0 * rho * h[2],
                ];
                // rows of the Jacobian of h w.r.t. (s_k, u_k, s_{k+1})
                let rx = [
                    (sidx(k, 0), -1.0),
                    (sidx(k, 2), u.v * dt * sn),
                    (cidx(k, 0), -dt * cs),
                    (sidx(k + 1, 0), 1.0),
                ];
                let ry = [
                    (sidx(k, 1), -1.0),
                    (sidx(k, 2), -u.v * dt * cs),
                    (cidx(k, 0), -dt * sn),
                    (sidx(k + 1, 1), 1.0),
                ];
                let rt = [(sidx(k, 2), -1.0), (cidx(k, 1), -dt), (sidx(k + 1, 2), 1.0)];
                for (row, mult) in [(&rx[..], m[0]), (&ry[..], m[1]), (&rt[..], m[2])] {
                    for &(i, d) in row {
                        a.g(i, mult * d);
                    }
                    a.outer(row, 2.0 * rho);
                }
            }
        }

        // consensus
        let rho = p.penalties.cons;
        for k in 0..p.consensus_len {
            let x = stacked(&tr.states[k], &tr.controls[k]);
            let d = stacked_diff(x, cons.stacked(k));
            let lam = p.duals.cons[k];
            for c in 0..5 {
                total += lam[c] * d[c] + rho * d[c] * d[c];
            }
            if let Some(a) = acc.as_deref_mut() {
                for c in 0..5 {
                    let i = if c < 3 { sidx(k, c) } else { cidx(k, c - 3) };
                    a.g(i, lam[c] + 2.0 * rho * d[c]);
                    a.h(i, i, 2.0 * rho);
                }
            }
        }

        Terms { lagrangian: total }
    }
}

fn inequality_term(
    s: &RobotState,
    k: usize,
    c: [f64; 2],
    r: f64,
    lam: f64,
    rho: f64,
    rule: PenaltyRule,
    acc: Option<&mut Accum>,
) -> f64 {
    let dx = s.p_x - c[0];
    let dy = s.p_y - c[1];
    let g = r * r - (dx * dx + dy * dy);
    let active = g > 0.0 || (rule == PenaltyRule::ViolatedOrPriced && lam > 0.0);
    let mut v = lam * g;
    if active {
        v += rho * g * g;
    }
    if let Some(a) = acc {
        let m = lam + if active { 2.0 * rho * g } else { 0.0 };
        a.g(sidx(k, 0), -2.0 * dx * m);
        a.g(sidx(k, 1), -2.0 * dy * m);
        if active {
            a.outer(&[(sidx(k, 0), -2.0 * dx), (sidx(k, 1), -2.0 * dy)], 2.0 * rho);
        }
    }
    v
}

fn limit_terms(p: &BranchProblem, tr: &Trajectory, acc: &mut Accum) -> f64 {
    let l = &p.limits;
    let wl = p.limit_weight;
    let mut total = 0.0;
    for (k, u) in tr.controls.iter().enumerate() {
        let ev = if u.v > l.v_max {
            u.v - l.v_max
        } else if u.v < l.v_min {
            u.v - l.v_min
        } else {
            0.0
        };
        let ew = if u.omega > l.omega_max {
            u.omega - l.omega_max
        } else if u.omega < -l.omega_max {
            u.omega + l.omega_max
        } else {
            0.0
        };
        total += wl * (ev * ev + ew * ew);
        if ev != 0.0 {
            acc.g(cidx(k, 0), 2.0 * wl * ev);
            acc.h(cidx(k, 0), cidx(k, 0), 2.0 * wl);
        }
        if ew != 0.0 {
            acc.g(cidx(k, 1), 2.0 * wl * ew);
            acc.h(cidx(k, 1), cidx(k, 1), 2.0 * wl);
        }
    }
    total
}

/// Largest positive entry of the obstacle and risk inequalities over the
/// decision steps, or zero when all are satisfied.
pub fn max_violation(p: &BranchProblem, tr: &Trajectory) -> (f64, f64) {
    let obs = g_obs(tr, &p.obstacles)
        .iter()
        .skip(1)
        .flatten()
        .fold(0.0f64, |m, &g| m.max(g));
    let risk = g_risk(tr, &p.config)
        .iter()
        .skip(1)
        .flatten()
        .fold(0.0f64, |m, &g| m.max(g));
    (obs, risk)
}

/// Kinematic multipliers that make the augmented Lagrangian stationary in
/// every free state, given the other multipliers. Obtained by the adjoint
/// recursion `mu(k-1) = -(dJ/ds(k) - df/ds(k)^T mu(k))`, where `mu` is the
/// effective multiplier `lambda + 2 rho h`.
pub fn kin_multiplier_estimate(p: &BranchProblem, tr: &Trajectory, cons: &ConsensusState, rule: PenaltyRule) -> Vec<[f64; 3]> {
    let mut q = p.clone();
    q.penalties.kin = 0.0;
    q.duals.kin.iter_mut().for_each(|l| *l = [0.0; 3]);
    let grad = evaluate_with(&q, tr, cons, false, rule).gradient;
    let n = p.horizon;
    let h = h_kin(tr);
    let mut mu = vec![[0.0; 3]; n - 1];
    let mut next = [0.0; 3];
    for k in (1..n).rev() {
        let i = state_index(k).expect("free state");
        let mut m = [-grad[i], -grad[i + 1], -grad[i + 2]];
        if k < n - 1 {
            let s = tr.states[k];
            let u = tr.controls[k];
            let (sn, cs) = s.theta.sin_cos();
            m[0] += next[0];
            m[1] += next[1];
            m[2] += next[2] + u.v * p.dt * (cs * next[1] - sn * next[0]);
        }
        mu[k - 1] = m;
        next = m;
    }
    mu.iter()
        .zip(&h)
        .map(|(m, h)| [0, 1, 2].map(|c| m[c] - 2.0 * p.penalties.kin * h[c]))
        .collect()
}

pub fn max_kin_residual(tr: &Trajectory) -> f64 {
    h_kin(tr)
        .iter()
        .flatten()
        .fold(0.0f64, |m, &h| m.max(h.abs()))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Hypothesis, RiskRegion};
    use crate::kinematics::rollout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_config() -> RiskRegionConfig {
        RiskRegionConfig {
            hypothesis_index: 0,
            hypothesis: Hypothesis::Neglect,
            regions: vec![],
        }
    }

    fn straight(n: usize, v: f64) -> Trajectory {
        rollout(&RobotState::new(0.0, 0.0, 0.0), &vec![ControlInput::new(v, 0.0); n], 0.25).unwrap()
    }

    #[test]
    fn cost_vanishes_on_reference() {
        let tr = straight(10, 1.8);
        let end = tr.states[9];
        let w = CostWeights {
            guide_point: end.position(),
            ..Default::default()
        };
        assert_eq!(cost(&tr, &w, &ControlInput::new(1.8, 0.0)), 0.0);
    }

    #[test]
    fn stationary_cost_is_velocity_only() {
        let tr = straight(24, 0.0);
        let w = CostWeights::default();
        let c = cost(&tr, &w, &ControlInput::default());
        assert!((c - 24.0 * 5.0 * 1.8 * 1.8).abs() < 1e-9);
        let w2 = CostWeights { w_vel: 10.0, ..w };
        assert!((cost(&tr, &w2, &ControlInput::default()) - 2.0 * c).abs() < 1e-9);
    }

    #[test]
    fn obstacle_residual_cases() {
        let tr = straight(2, 0.0);
        let g = g_obs(&tr, &[Obstacle::fixed(0, [3.0, 0.0], 1.0)]);
        assert_eq!(g[0][0], -8.0);
        let g = g_obs(&tr, &[Obstacle::fixed(0, [0.0, 2.0], 2.0)]);
        assert_eq!(g[0][0], 0.0);
        let g = g_obs(&tr, &[Obstacle::fixed(0, [0.0, 0.0], 1.5)]);
        assert_eq!(g[0][0], 2.25);
    }

    #[test]
    fn moving_obstacle_is_predicted() {
        let tr = straight(3, 0.0);
        let mut o = Obstacle::fixed(0, [1.0, 0.0], 0.5);
        o.velocity = [2.0, 0.0];
        let g = g_obs(&tr, &[o]);
        assert_eq!(g[2][0], 0.25 - 4.0);
    }

    #[test]
    fn risk_residuals() {
        let tr = straight(4, 1.0);
        assert!(g_risk(&tr, &empty_config()).iter().all(|r| r.is_empty()));
        let o = Obstacle::fixed(0, [1.3, 0.4], 0.7);
        let cfg = RiskRegionConfig {
            hypothesis_index: 1,
            hypothesis: Hypothesis::MaxObstacleSpeed(0.5),
            regions: vec![RiskRegion {
                center: o.center,
                radius: o.radius,
                tangent_index: 1,
                slot_index: 0,
                source_region: 0,
            }],
        };
        assert_eq!(g_risk(&tr, &cfg), g_obs(&tr, &[o]));
    }

    #[test]
    fn kinematic_residuals() {
        let tr = rollout(&RobotState::new(0.5, -1.0, 0.4), &vec![ControlInput::new(1.2, 0.3); 8], 0.25).unwrap();
        // exact up to the rounding of (a + b) - a - b
        assert!(h_kin(&tr).iter().flatten().all(|h| h.abs() < 1e-15));
        let mut bad = tr.clone();
        bad.states[7].p_x += 0.125;
        let h = h_kin(&bad);
        let nonzero: Vec<_> = h.iter().flatten().filter(|x| x.abs() > 1e-15).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((h[6][0] - 0.125).abs() < 1e-15);
    }

    fn feasible_problem(n: usize, nc: usize) -> (BranchProblem, Trajectory, ConsensusState) {
        let tr = straight(n, 1.0);
        let w = CostWeights {
            v_ref: 1.2,
            guide_point: [3.0, 0.5],
            ..Default::default()
        };
        let p = BranchProblem::new(
            tr.states[0],
            ControlInput::new(0.8, 0.0),
            empty_config(),
            vec![Obstacle::fixed(0, [0.5, 3.0], 0.5)],
            w,
            n,
            0.25,
            nc,
        )
        .unwrap();
        let cons = ConsensusState::from_prefix(&tr, nc);
        (p, tr, cons)
    }

    #[test]
    fn lagrangian_reduces_to_cost() {
        let (p, tr, cons) = feasible_problem(8, 3);
        let al = augmented_lagrangian(&p, &tr, &cons).unwrap();
        assert_eq!(al, cost(&tr, &p.weights, &p.prev_control));
    }

    #[test]
    fn lagrangian_inequality_arithmetic() {
        let (mut p, tr, cons) = feasible_problem(4, 0);
        let base = augmented_lagrangian(&p, &tr, &cons).unwrap();
        // state 2 sits at (0.5, 0): put an obstacle so that g = 0.5 there only
        let s = tr.states[2];
        p.obstacles = vec![Obstacle::fixed(0, [s.p_x, s.p_y], 0.5f64.sqrt())];
        p.duals = Duals::zeros(4, 1, 0, 0);
        // other steps are far enough to be inactive with zero multiplier
        let g = g_obs(&tr, &p.obstacles);
        assert!((g[2][0] - 0.5).abs() < 1e-15);
        p.duals.obs[1] = 0.2;
        let with = augmented_lagrangian(&p, &tr, &cons).unwrap();
        let inactive: f64 = [1usize, 3].iter().map(|&k| g[k][0].max(0.0).powi(2)).sum();
        assert!((with - base - 0.35 - inactive).abs() < 1e-12);

        // satisfied entry: linear dual term only
        p.obstacles = vec![Obstacle::fixed(0, [s.p_x, s.p_y + 0.5f64.sqrt()], 0.0)];
        let g = g_obs(&tr, &p.obstacles);
        assert!((g[2][0] + 0.5).abs() < 1e-12);
        p.duals.obs = vec![0.0, 0.2, 0.0];
        let with = augmented_lagrangian(&p, &tr, &cons).unwrap();
        assert!((with - base + 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, tr, cons) = feasible_problem(6, 2);
        p.duals.kin.pop();
        assert!(matches!(augmented_lagrangian(&p, &tr, &cons), Err(CmpcError::InvalidArgument(_))));
        let (p, tr, _) = feasible_problem(6, 2);
        assert!(augmented_lagrangian(&p, &tr, &ConsensusState::empty()).is_err());
    }

    #[test]
    fn zero_penalties_and_duals_give_cost() {
        let (mut p, mut tr, cons) = feasible_problem(6, 2);
        tr.states[3].p_y += 0.4;
        p.penalties = Penalties {
            obs: 0.0,
            risk: 0.0,
            kin: 0.0,
            cons: 0.0,
        };
        let al = augmented_lagrangian(&p, &tr, &cons).unwrap();
        assert!((al - cost(&tr, &p.weights, &p.prev_control)).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance() {
        let tr = rollout(&RobotState::new(0.2, 0.1, 0.3), &vec![ControlInput::new(1.0, 0.2); 6], 0.25).unwrap();
        let obs = [Obstacle::fixed(0, [1.0, 1.0], 0.6)];
        let mut moved = tr.clone();
        for s in &mut moved.states {
            s.p_x += 7.5;
            s.p_y -= 3.25;
        }
        let obs2 = [Obstacle::fixed(0, [8.5, -2.25], 0.6)];
        for (a, b) in g_obs(&tr, &obs).iter().flatten().zip(g_obs(&moved, &obs2).iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = 8;
            let controls: Vec<_> = (0..n)
                .map(|_| ControlInput::new(rng.gen_range(-0.3..2.3), rng.gen_range(-1.4..1.4)))
                .collect();
            let mut tr = rollout(&RobotState::new(0.0, 0.0, rng.gen_range(-3.0..3.0)), &controls, 0.25).unwrap();
            for s in tr.states.iter_mut().skip(1) {
                s.p_x += rng.gen_range(-0.2..0.2);
                s.p_y += rng.gen_range(-0.2..0.2);
                s.theta += rng.gen_range(-0.2..0.2);
            }
            let obs = vec![Obstacle::fixed(0, [rng.gen_range(0.0..2.0), rng.gen_range(-1.0..1.0)], 0.8)];
            let mut p = BranchProblem::new(
                tr.states[0],
                ControlInput::new(1.0, 0.0),
                empty_config(),
                obs,
                CostWeights::default(),
                n,
                0.25,
                3,
            )
            .unwrap();
            for l in p.duals.obs.iter_mut() {
                *l = rng.gen_range(0.0..2.0);
            }
            for l in p.duals.kin.iter_mut().flatten() {
                *l = rng.gen_range(-2.0..2.0);
            }
            let cons = ConsensusState::from_prefix(&straight(n, 1.0), 3);
            let ev = evaluate(&p, &tr, &cons, false);
            let z = pack(&tr);
            for i in 0..z.len() {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fp = objective(&p, &unpack(&zp, &tr.states[0], 0.25), &cons);
                let fm = objective(&p, &unpack(&zm, &tr.states[0], 0.25), &cons);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - ev.gradient[i]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-5, "component {i}: fd={fd} analytic={}", ev.gradient[i]);
            }
        }
    }

    #[test]
    fn pack_round_trip() {
        let tr = rollout(&RobotState::new(1.0, 2.0, 0.5), &vec![ControlInput::new(1.0, 0.1); 5], 0.25).unwrap();
        let z = pack(&tr);
        assert_eq!(z.len(), 22);
        assert_eq!(unpack(&z, &tr.states[0], 0.25), tr);
    }

    #[test]
    fn kin_multiplier_estimate_zeroes_state_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = 10;
            let controls: Vec<_> = (0..n)
                .map(|_| ControlInput::new(rng.gen_range(0.0..2.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let mut tr = rollout(&RobotState::new(0.0, 0.0, rng.gen_range(-3.0..3.0)), &controls, 0.25).unwrap();
            tr.states[4].p_y += 0.1;
            let obs = vec![Obstacle::fixed(0, [1.0, 0.3], 0.8)];
            let mut p = BranchProblem::new(
                tr.states[0],
                ControlInput::new(1.0, 0.0),
                empty_config(),
                obs,
                CostWeights::default(),
                n,
                0.25,
                3,
            )
            .unwrap();
            p.duals.obs.iter_mut().for_each(|l| *l = rng.gen_range(0.0..2.0));
            let cons = ConsensusState::from_prefix(&straight(n, 1.0), 3);
            p.duals.kin = kin_multiplier_estimate(&p, &tr, &cons, PenaltyRule::Violated);
            let g = evaluate(&p, &tr, &cons, false).gradient;
            for k in 1..n {
                let i = state_index(k).unwrap();
                for c in 0..3 {
                    assert!(g[i + c].abs() < 1e-9, "state {k} component {c}: {}", g[i + c]);
                }
            }
        }
    }
}
