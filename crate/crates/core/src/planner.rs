//! Receding-horizon planner: turns one observation of the world into branch
//! problems, runs the ADMM solver and keeps warm-start state between cycles.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmSolver, SolveReport, SolverConfig};
use crate::error::{CmpcError, Result};
use crate::geometry::{build_configurations, ConfigLimits, Hypothesis, Obstacle, RiskRegionConfig};
use crate::kinematics::{rollout, ControlInput, ControlLimits, RobotState, Trajectory};
use crate::problem::{
    cost, g_obs, g_risk, h_kin, BranchProblem, CostWeights, Duals, Penalties,
};

/// Planner variants compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Three hypotheses sharing a consensus prefix.
    Cmpc,
    /// Same branches without a consensus prefix.
    Cmpc0,
    /// One branch that ignores occlusion.
    SingleHypNoRisk,
    /// One branch with worst-case risk regions.
    SingleHypRisk,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Cmpc,
        BaselineKind::Cmpc0,
        BaselineKind::SingleHypNoRisk,
        BaselineKind::SingleHypRisk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Cmpc => "cmpc",
            BaselineKind::Cmpc0 => "cmpc_0",
            BaselineKind::SingleHypNoRisk => "single_hyp_no_risk",
            BaselineKind::SingleHypRisk => "single_hyp_risk",
        }
    }

    /// Applies this variant's branch layout to `cfg`.
    pub fn configure(&self, cfg: &PlannerConfig) -> PlannerConfig {
        let mut out = cfg.clone();
        match self {
            BaselineKind::Cmpc => {}
            BaselineKind::Cmpc0 => out.consensus_len = 0,
            BaselineKind::SingleHypNoRisk => out.hypotheses = vec![Hypothesis::Neglect],
            BaselineKind::SingleHypRisk => {
                let worst = cfg
                    .hypotheses
                    .iter()
                    .filter_map(|h| h.v_obs_max())
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                    .unwrap_or(1.0);
                out.hypotheses = vec![Hypothesis::MaxObstacleSpeed(worst)];
            }
        }
        out
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = CmpcError;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CmpcError::InvalidArgument(format!("unknown planner kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub dt: f64,
    pub consensus_len: usize,
    pub hypotheses: Vec<Hypothesis>,
    pub weights: CostWeights,
    pub penalties: Penalties,
    pub limits: ControlLimits,
    pub regions: ConfigLimits,
    /// Obstacles and risk regions are inflated by this much (robot bounding
    /// radius plus clearance) before they become constraints.
    pub inflation: f64,
    pub solver: SolverConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            dt: 0.25,
            consensus_len: 8,
            hypotheses: vec![
                Hypothesis::Neglect,
                Hypothesis::MaxObstacleSpeed(0.5),
                Hypothesis::MaxObstacleSpeed(1.0),
            ],
            weights: CostWeights::default(),
            penalties: Penalties::default(),
            limits: ControlLimits::default(),
            regions: ConfigLimits::default(),
            inflation: 0.0,
            solver: SolverConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(CmpcError::Config(format!("horizon {} < 2", self.horizon)));
        }
        if self.consensus_len > self.horizon {
            return Err(CmpcError::Config(format!(
                "consensus length {} exceeds horizon {}",
                self.consensus_len, self.horizon
            )));
        }
        if self.hypotheses.is_empty() {
            return Err(CmpcError::Config("at least one branch hypothesis is required".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CmpcError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        self.solver.validate()
    }
}

/// What the planner sees at one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: RobotState,
    pub prev_control: ControlInput,
    /// Visible obstacles with their current velocities.
    pub visible: Vec<Obstacle>,
    pub guide_point: [f64; 2],
    /// Reference speed for this cycle.
    pub v_ref: f64,
}

/// Identifies a risk region across cycles: source obstacle, tangent, slot.
type RiskKey = (u32, u8, usize);

#[derive(Debug, Clone)]
struct WarmStart {
    trajectories: Vec<Trajectory>,
    obs: Vec<HashMap<u32, Vec<f64>>>,
    risk: Vec<HashMap<RiskKey, Vec<f64>>>,
    kin: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub report: SolveReport,
    pub configs: Vec<RiskRegionConfig>,
}

pub struct Planner {
    cfg: PlannerConfig,
    solver: AdmmSolver,
    warm: Option<WarmStart>,
}

fn shift_rows<T: Copy>(rows: &[T]) -> Vec<T> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut out = rows[1..].to_vec();
    out.push(rows[rows.len() - 1]);
    out
}

impl Planner {
    pub fn new(cfg: PlannerConfig) -> Result<Self> {
        cfg.validate()?;
        let solver = AdmmSolver::new(cfg.solver)?;
        Ok(Self { cfg, solver, warm: None })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    /// Drops warm-start state.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Risk configurations with inflated radii. Regions that already cover
    /// the robot carry no usable information and are dropped.
    pub fn risk_configs(&self, obs: &Observation) -> Result<Vec<RiskRegionConfig>> {
        // the risk radius scales with time-to-reach; the commanded cruise
        // speed keeps it bounded while the robot brakes
        let speed = obs.prev_control.v.abs().max(self.cfg.weights.v_ref);
        let mut configs = build_configurations(&obs.state, speed, &obs.visible, &self.cfg.hypotheses, &self.cfg.regions)?;
        for c in &mut configs {
            for r in &mut c.regions {
                r.radius += self.cfg.inflation;
            }
            c.regions.retain(|r| obs.state.distance_to(r.center) > r.radius);
        }
        Ok(configs)
    }

    /// Builds branch problems and initial guesses without solving.
    pub fn build(&self, obs: &Observation) -> Result<(Vec<BranchProblem>, Vec<Trajectory>, Vec<RiskRegionConfig>)> {
        let cfg = &self.cfg;
        let configs = self.risk_configs(obs)?;
        let obstacles: Vec<Obstacle> = obs
            .visible
            .iter()
            .map(|o| Obstacle {
                radius: o.radius + cfg.inflation,
                ..*o
            })
            .collect();
        let weights = CostWeights {
            guide_point: obs.guide_point,
            v_ref: obs.v_ref,
            ..cfg.weights
        };
        let warm = self
            .warm
            .as_ref()
            .filter(|w| w.trajectories.len() == configs.len());
        let mut problems = Vec::with_capacity(configs.len());
        let mut init = Vec::with_capacity(configs.len());
        for (z, c) in configs.iter().enumerate() {
            let mut p = BranchProblem::new(
                obs.state,
                obs.prev_control,
                c.clone(),
                obstacles.clone(),
                weights,
                cfg.horizon,
                cfg.dt,
                cfg.consensus_len,
            )?;
            p.penalties = cfg.penalties;
            p.limits = cfg.limits;
            let mut candidates: Vec<(bool, Trajectory)> = seed_rollouts(&obs.state, &obs.prev_control, obs.v_ref, cfg)?
                .into_iter()
                .map(|t| (false, t))
                .collect();
            if let Some(w) = warm {
                p.duals = warm_duals(&p, w, z);
                let mut t = w.trajectories[z].clone();
                t.states[0] = obs.state;
                candidates.insert(0, (true, t));
            }
            let mut best: Option<(f64, bool, Trajectory)> = None;
            for (is_warm, t) in candidates {
                let score = seed_score(&p, &t);
                if best.as_ref().is_none_or(|b| score < b.0) {
                    best = Some((score, is_warm, t));
                }
            }
            let (_, _, t) = best.expect("at least one candidate");
            init.push(t);
            problems.push(p);
        }
        Ok((problems, init, configs))
    }

    pub fn plan(&mut self, obs: &Observation) -> Result<PlanOutcome> {
        let (problems, init, configs) = self.build(obs)?;
        let keys: Vec<(Vec<u32>, Vec<RiskKey>)> = problems
            .iter()
            .map(|p| {
                (
                    p.obstacles.iter().map(|o| o.id).collect(),
                    p.config
                        .regions
                        .iter()
                        .map(|r| (r.source_region, r.tangent_index, r.slot_index))
                        .collect(),
                )
            })
            .collect();
        let report = match self.solver.solve(problems, init) {
            Ok(r) => r,
            Err(e) => {
                self.warm = None;
                return Err(e);
            }
        };
        self.warm = Some(self.remember(&report, &keys));
        Ok(PlanOutcome { report, configs })
    }

    fn remember(&self, report: &SolveReport, keys: &[(Vec<u32>, Vec<RiskKey>)]) -> WarmStart {
        let rows = self.cfg.horizon - 1;
        let mut obs = Vec::new();
        let mut risk = Vec::new();
        let mut kin = Vec::new();
        for (d, (ids, rkeys)) in report.duals.iter().zip(keys) {
            obs.push(split_rows(&d.obs, ids, rows));
            risk.push(split_rows(&d.risk, rkeys, rows));
            kin.push(shift_rows(&d.kin));
        }
        WarmStart {
            trajectories: report.trajectories.iter().map(|t| t.shifted()).collect(),
            obs,
            risk,
            kin,
        }
    }
}

/// Rollouts used to seed the branch solves: a few cruise speeds, each
/// either straight or as a lane change (turn, then turn back) of several
/// rates and durations. The augmented Lagrangian converges slowly when
/// started on the wrong side of an obstacle, so each branch starts from
/// the best of these and the warm start.
fn seed_rollouts(s0: &RobotState, prev: &ControlInput, v_ref: f64, cfg: &PlannerConfig) -> Result<Vec<Trajectory>> {
    let n = cfg.horizon;
    let mut out = Vec::new();
    for v in [prev.v, v_ref, 0.5 * v_ref, 0.0] {
        let mut plans = vec![vec![ControlInput::new(v, 0.0); n]];
        for w in [0.3, 0.6, 1.0] {
            for m in [4, 8] {
                for sign in [1.0, -1.0] {
                    let mut u = vec![ControlInput::new(v, 0.0); n];
                    for (k, c) in u.iter_mut().enumerate().take((2 * m).min(n)) {
                        c.omega = if k < m { sign * w } else { -sign * w };
                    }
                    plans.push(u);
                }
            }
        }
        for u in plans {
            out.push(rollout(s0, &u, cfg.dt)?);
        }
    }
    Ok(out)
}

/// Cost plus heavily weighted constraint violation.
fn seed_score(p: &BranchProblem, t: &Trajectory) -> f64 {
    const VIOLATION_WEIGHT: f64 = 1e3;
    let positive = |rows: Vec<Vec<f64>>| -> f64 { rows.iter().skip(1).flatten().map(|g| g.max(0.0)).sum() };
    let kin: f64 = h_kin(t).iter().flatten().map(|h| h.abs()).sum();
    cost(t, &p.weights, &p.prev_control)
        + VIOLATION_WEIGHT * (positive(g_obs(t, &p.obstacles)) + positive(g_risk(t, &p.config)) + kin)
}

fn split_rows<K: Clone + Eq + std::hash::Hash>(flat: &[f64], keys: &[K], rows: usize) -> HashMap<K, Vec<f64>> {
    let m = keys.len();
    keys.iter()
        .enumerate()
        .map(|(j, key)| {
            let col: Vec<f64> = (0..rows).map(|k| flat[k * m + j]).collect();
            (key.clone(), shift_rows(&col))
        })
        .collect()
}

fn warm_duals(p: &BranchProblem, w: &WarmStart, z: usize) -> Duals {
    let rows = p.horizon - 1;
    let mut d = Duals::zeros(p.horizon, p.obstacles.len(), p.config.regions.len(), p.consensus_len);
    let n_obs = p.obstacles.len();
    for (j, o) in p.obstacles.iter().enumerate() {
        if let Some(col) = w.obs[z].get(&o.id) {
            for k in 0..rows {
                d.obs[k * n_obs + j] = col[k];
            }
        }
    }
    let n_risk = p.config.regions.len();
    for (j, r) in p.config.regions.iter().enumerate() {
        if let Some(col) = w.risk[z].get(&(r.source_region, r.tangent_index, r.slot_index)) {
            for k in 0..rows {
                d.risk[k * n_risk + j] = col[k];
            }
        }
    }
    if w.kin[z].len() == rows {
        d.kin = w.kin[z].clone();
    }
    d
}
