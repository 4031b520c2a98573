//! Consensus ADMM over trajectory branches.
//!
//! Each outer iteration solves every branch against the current consensus
//! segment in parallel, updates the branch multipliers, averages the branch
//! prefixes into a new consensus segment and updates the consensus
//! multipliers. Iteration stops when every branch is stationary, every
//! prefix agrees with the consensus and the consensus has stopped moving.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CmpcError, Result};
use crate::kinematics::{wrap_angle, ControlInput, RobotState, Trajectory};
use crate::newton::{solve_branch, NewtonParams};
use crate::problem::{
    evaluate_with, g_obs, g_risk, h_kin, max_kin_residual, max_violation, norm, stacked, stacked_diff, BranchProblem,
    ConsensusState, Duals,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Bound on each branch's Lagrangian gradient norm.
    pub eps_dual: f64,
    /// Bound on each branch's distance to the consensus prefix.
    pub xi_pri: f64,
    /// Bound on the change of the consensus prefix between iterations.
    pub xi_dual: f64,
    /// Largest accepted positive obstacle/risk residual at termination, m^2.
    pub eps_feas: f64,
    pub newton: NewtonParams,
    /// Worker threads for branch solves.
    pub workers: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            eps_dual: 0.15,
            xi_pri: 0.1,
            xi_dual: 0.1,
            eps_feas: 1e-2,
            newton: NewtonParams::default(),
            workers: 4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(CmpcError::Config("max_iters must be positive".into()));
        }
        for (name, v) in [
            ("eps_dual", self.eps_dual),
            ("xi_pri", self.xi_pri),
            ("xi_dual", self.xi_dual),
            ("eps_feas", self.eps_feas),
            ("grad_tol", self.newton.grad_tol),
        ] {
            if !(v > 0.0) {
                return Err(CmpcError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.workers == 0 {
            return Err(CmpcError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Residuals entering the termination test.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_z |grad L_z|`
    pub max_grad: f64,
    /// `max_z |s_z - s~|` over the consensus prefix
    pub max_primal: f64,
    /// `|s~(i+1) - s~(i)|`
    pub consensus_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchResidual {
    pub grad_norm: f64,
    pub primal: f64,
    pub obs_violation: f64,
    pub risk_violation: f64,
    pub kin_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub branches: Vec<BranchResidual>,
    pub consensus_dual_residual: f64,
    /// Largest branch gradient norm at the starting point of the first
    /// iteration.
    pub initial_grad_norm: f64,
    pub newton_iterations: usize,
    pub wall_ms: f64,
    pub trajectories: Vec<Trajectory>,
    pub consensus: ConsensusState,
    pub duals: Vec<Duals>,
    pub applied_control: ControlInput,
}

/// Termination test; all comparisons are non-strict.
pub fn check_termination(r: &Residuals, cfg: &SolverConfig) -> bool {
    r.max_grad <= cfg.eps_dual && r.max_primal <= cfg.xi_pri && r.consensus_change <= cfg.xi_dual
}

/// Multiplier step for the obstacle, risk and kinematic constraints.
/// Inequality multipliers are projected onto `>= 0`.
pub fn update_branch_duals(p: &BranchProblem, tr: &Trajectory) -> Duals {
    let mut d = p.duals.clone();
    let go = g_obs(tr, &p.obstacles);
    let gr = g_risk(tr, &p.config);
    let n_obs = p.obstacles.len();
    let n_risk = p.config.regions.len();
    for k in 1..p.horizon {
        for j in 0..n_obs {
            let l = &mut d.obs[(k - 1) * n_obs + j];
            *l = (*l + 2.0 * p.penalties.obs * go[k][j]).max(0.0);
        }
        for j in 0..n_risk {
            let l = &mut d.risk[(k - 1) * n_risk + j];
            *l = (*l + 2.0 * p.penalties.risk * gr[k][j]).max(0.0);
        }
    }
    for (l, h) in d.kin.iter_mut().zip(h_kin(tr)) {
        for c in 0..3 {
            l[c] += 2.0 * p.penalties.kin * h[c];
        }
    }
    d
}

/// Mean of the branch prefixes. Headings are unwrapped around their
/// circular mean before averaging so that branches straddling `+-pi`
/// average correctly and the deviations still sum to zero.
pub fn consensus_mean(trajs: &[Trajectory], len: usize) -> ConsensusState {
    let nz = trajs.len() as f64;
    let mut states = Vec::with_capacity(len);
    let mut controls = Vec::with_capacity(len);
    for k in 0..len {
        let mut acc = [0.0; 5];
        let (mut sn, mut cs) = (0.0, 0.0);
        for t in trajs {
            let x = stacked(&t.states[k], &t.controls[k]);
            for c in [0, 1, 3, 4] {
                acc[c] += x[c];
            }
            sn += x[2].sin();
            cs += x[2].cos();
        }
        let circ = sn.atan2(cs);
        let dev: f64 = trajs.iter().map(|t| wrap_angle(t.states[k].theta - circ)).sum();
        let theta = circ + dev / nz;
        states.push(RobotState {
            p_x: acc[0] / nz,
            p_y: acc[1] / nz,
            theta,
        });
        controls.push(ControlInput::new(acc[3] / nz, acc[4] / nz));
    }
    ConsensusState { states, controls }
}

/// Consensus average and the per-branch consensus multiplier steps
/// `lam_cons_z += 2 rho_cons (s_z - s~)`.
pub fn update_consensus(trajs: &[Trajectory], problems: &[BranchProblem]) -> (ConsensusState, Vec<Vec<[f64; 5]>>) {
    let len = problems.first().map_or(0, |p| p.consensus_len);
    let cons = consensus_mean(trajs, len);
    let duals = problems
        .iter()
        .zip(trajs)
        .map(|(p, t)| {
            (0..len)
                .map(|k| {
                    let d = stacked_diff(stacked(&t.states[k], &t.controls[k]), cons.stacked(k));
                    let mut l = p.duals.cons[k];
                    for c in 0..5 {
                        l[c] += 2.0 * p.penalties.cons * d[c];
                    }
                    l
                })
                .collect()
        })
        .collect();
    (cons, duals)
}

/// `|s_z - s~|` over the stacked prefix.
pub fn prefix_distance(tr: &Trajectory, cons: &ConsensusState) -> f64 {
    (0..cons.len())
        .map(|k| {
            stacked_diff(stacked(&tr.states[k], &tr.controls[k]), cons.stacked(k))
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn consensus_change(a: &ConsensusState, b: &ConsensusState) -> f64 {
    (0..a.len())
        .map(|k| stacked_diff(a.stacked(k), b.stacked(k)).iter().map(|d| d * d).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Parallel consensus ADMM solver. Results do not depend on the number of
/// workers: branches are solved independently and reductions run in branch
/// order on the calling thread.
pub struct AdmmSolver {
    cfg: SolverConfig,
    pool: Option<rayon::ThreadPool>,
}

impl AdmmSolver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| CmpcError::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { cfg, pool })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn map_branches<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }

    /// Runs the ADMM loop on fully built branch problems, each warm started
    /// from the matching entry of `init`.
    pub fn solve(&self, mut problems: Vec<BranchProblem>, init: Vec<Trajectory>) -> Result<SolveReport> {
        let start = Instant::now();
        let cfg = &self.cfg;
        if problems.is_empty() {
            return Err(CmpcError::InvalidArgument("no branches to solve".into()));
        }
        if init.len() != problems.len() {
            return Err(CmpcError::InvalidArgument(format!(
                "{} initial trajectories for {} branches",
                init.len(),
                problems.len()
            )));
        }
        let nc = problems[0].consensus_len;
        if problems.iter().any(|p| p.consensus_len != nc || p.horizon != problems[0].horizon) {
            return Err(CmpcError::InvalidArgument("branches disagree on horizon shape".into()));
        }
        let mut trajs = init;
        for (p, t) in problems.iter().zip(trajs.iter_mut()) {
            t.states[0] = p.initial_state;
        }
        let mut consensus = consensus_mean(&trajs, nc);
        for p in problems.iter_mut() {
            p.duals.cons = vec![[0.0; 5]; nc];
        }
        let initial_grad_norm = self
            .map_branches(problems.len(), |z| {
                norm(&evaluate_with(&problems[z], &trajs[z], &consensus, false, cfg.newton.penalty_rule).gradient)
            })
            .into_iter()
            .fold(0.0, f64::max);

        let mut iterations = 0;
        let mut converged = false;
        let mut newton_iterations = 0;
        let mut residuals = Residuals::default();
        let mut grads = vec![initial_grad_norm; problems.len()];
        while iterations < cfg.max_iters {
            let outcomes = self.map_branches(problems.len(), |z| {
                solve_branch(&problems[z], &trajs[z], &consensus, &cfg.newton)
                    .map(|o| (update_branch_duals(&problems[z], &o.trajectory), o))
            });
            let mut solved = Vec::with_capacity(outcomes.len());
            let mut failure = None;
            for o in outcomes {
                match o {
                    Ok(v) => solved.push(v),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failure {
                if iterations == 0 {
                    return Err(CmpcError::PlannerFailure(format!("branch solve failed: {e}")));
                }
                log::warn!("stopping ADMM after {iterations} iterations: {e}");
                break;
            }
            iterations += 1;
            for (z, (duals, outcome)) in solved.into_iter().enumerate() {
                newton_iterations += outcome.iterations;
                problems[z].duals = duals;
                trajs[z] = outcome.trajectory;
            }
            let (next, cons_duals) = update_consensus(&trajs, &problems);
            for (p, d) in problems.iter_mut().zip(cons_duals) {
                p.duals.cons = d;
            }
            residuals.consensus_change = consensus_change(&next, &consensus);
            consensus = next;
            residuals.max_primal = trajs
                .iter()
                .map(|t| prefix_distance(t, &consensus))
                .fold(0.0, f64::max);
            grads = self.map_branches(problems.len(), |z| {
                norm(&evaluate_with(&problems[z], &trajs[z], &consensus, false, cfg.newton.penalty_rule).gradient)
            });
            residuals.max_grad = grads.iter().copied().fold(0.0, f64::max);
            let feasible = problems.iter().zip(&trajs).all(|(p, t)| {
                let (o, r) = max_violation(p, t);
                o <= cfg.eps_feas && r <= cfg.eps_feas
            });
            log::trace!(
                "admm {iterations}: grad {:.3e} primal {:.3e} change {:.3e} feasible {feasible}",
                residuals.max_grad,
                residuals.max_primal,
                residuals.consensus_change
            );
            if feasible && check_termination(&residuals, cfg) {
                converged = true;
                break;
            }
        }

        let branches = problems
            .iter()
            .zip(&trajs)
            .zip(&grads)
            .map(|((p, t), &g)| {
                let (o, r) = max_violation(p, t);
                BranchResidual {
                    grad_norm: g,
                    primal: prefix_distance(t, &consensus),
                    obs_violation: o,
                    risk_violation: r,
                    kin_residual: max_kin_residual(t),
                }
            })
            .collect();
        let applied_control = if nc > 0 {
            consensus.controls[0]
        } else {
            // without a shared prefix, act on the most cautious branch
            trajs[trajs.len() - 1].controls[0]
        };
        Ok(SolveReport {
            iterations,
            converged,
            branches,
            consensus_dual_residual: residuals.consensus_change,
            initial_grad_norm,
            newton_iterations,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            trajectories: trajs,
            consensus,
            duals: problems.into_iter().map(|p| p.duals).collect(),
            applied_control,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Hypothesis, Obstacle, RiskRegionConfig};
    use crate::kinematics::rollout;
    use crate::problem::{CostWeights, Penalties};

    fn neglect(z: usize) -> RiskRegionConfig {
        RiskRegionConfig {
            hypothesis_index: z,
            hypothesis: Hypothesis::Neglect,
            regions: vec![],
        }
    }

    fn straight(v: f64, n: usize) -> Trajectory {
        rollout(&RobotState::new(0.0, 0.0, 0.0), &vec![ControlInput::new(v, 0.0); n], 0.25).unwrap()
    }

    /// Two-step problem whose only obstacle sits on the second state.
    fn one_obstacle(radius_sq: f64, lambda: f64) -> (BranchProblem, Trajectory) {
        let tr = straight(1.0, 2);
        let at = tr.states[1].position();
        let mut p = BranchProblem::new(
            tr.states[0],
            ControlInput::default(),
            neglect(0),
            vec![Obstacle::fixed(0, at, radius_sq.sqrt())],
            CostWeights::default(),
            2,
            0.25,
            0,
        )
        .unwrap();
        p.penalties = Penalties {
            obs: 1.0,
            ..Default::default()
        };
        p.duals.obs[0] = lambda;
        (p, tr)
    }

    #[test]
    fn violated_obstacle_raises_multiplier() {
        let (p, tr) = one_obstacle(0.3, 0.0);
        let d = update_branch_duals(&p, &tr);
        assert!((d.obs[0] - 0.6).abs() < 1e-12, "{}", d.obs[0]);
    }

    #[test]
    fn satisfied_obstacle_projects_to_zero() {
        let (mut p, tr) = one_obstacle(0.3, 0.1);
        // move the obstacle so that g = -0.3 at the second state
        let s = tr.states[1].position();
        p.obstacles[0].center = [s[0] + 0.6f64.sqrt(), s[1]];
        assert!((g_obs(&tr, &p.obstacles)[1][0] + 0.3).abs() < 1e-12);
        assert_eq!(update_branch_duals(&p, &tr).obs[0], 0.0);
    }

    #[test]
    fn zero_residuals_keep_duals() {
        let tr = straight(1.0, 6);
        let mut p = BranchProblem::new(tr.states[0], ControlInput::default(), neglect(0), vec![], CostWeights::default(), 6, 0.25, 2)
            .unwrap();
        p.duals.kin = vec![[0.2, -0.1, 0.05]; 5];
        let d = update_branch_duals(&p, &tr);
        assert_eq!(d, p.duals);
    }

    fn problems(nz: usize, nc: usize, n: usize) -> Vec<BranchProblem> {
        (0..nz)
            .map(|z| {
                BranchProblem::new(
                    RobotState::new(0.0, 0.0, 0.0),
                    ControlInput::default(),
                    neglect(z),
                    vec![],
                    CostWeights::default(),
                    n,
                    0.25,
                    nc,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn consensus_is_midpoint() {
        let mut a = straight(1.0, 4);
        let mut b = straight(1.0, 4);
        a.states[1].p_x = 1.0;
        b.states[1].p_x = 2.0;
        let ps = problems(2, 2, 4);
        let (cons, duals) = update_consensus(&[a, b], &ps);
        assert!((cons.states[1].p_x - 1.5).abs() < 1e-15);
        let rho = ps[0].penalties.cons;
        assert!((duals[0][1][0] + 2.0 * rho * 0.5).abs() < 1e-15);
        assert!((duals[1][1][0] - 2.0 * rho * 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_prefixes_leave_consensus_duals() {
        let t = straight(1.3, 5);
        let ps = problems(3, 3, 5);
        let (cons, duals) = update_consensus(&[t.clone(), t.clone(), t.clone()], &ps);
        assert_eq!(cons, ConsensusState::from_prefix(&t, 3));
        assert!(duals.iter().flatten().flatten().all(|&l| l == 0.0));
    }

    #[test]
    fn heading_mean_across_branch_cut() {
        let mut a = straight(1.0, 3);
        let mut b = straight(1.0, 3);
        a.states[1].theta = std::f64::consts::PI - 0.1;
        b.states[1].theta = -std::f64::consts::PI + 0.1;
        let cons = consensus_mean(&[a, b], 2);
        assert!((cons.states[1].theta.abs() - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn termination_is_non_strict() {
        let cfg = SolverConfig::default();
        assert!(check_termination(&Residuals::default(), &cfg));
        let at = Residuals {
            max_grad: 0.15,
            max_primal: 0.1,
            consensus_change: 0.1,
        };
        assert!(check_termination(&at, &cfg));
        let over = Residuals { max_grad: 0.151, ..at };
        assert!(!check_termination(&over, &cfg));
    }

    #[test]
    fn single_branch_has_zero_consensus_residual() {
        let ps = problems(1, 8, 24);
        let mut w = ps[0].weights;
        w.guide_point = [10.8, 0.0];
        let ps: Vec<_> = ps.into_iter().map(|p| BranchProblem { weights: w, ..p }).collect();
        let solver = AdmmSolver::new(SolverConfig {
            workers: 1,
            ..Default::default()
        })
        .unwrap();
        let r = solver.solve(ps, vec![straight(1.0, 24)]).unwrap();
        assert!(r.converged);
        assert_eq!(r.branches[0].primal, 0.0);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let mut ps = problems(3, 8, 24);
        for (z, p) in ps.iter_mut().enumerate() {
            p.weights.guide_point = [10.0, z as f64 - 1.0];
            p.obstacles = vec![Obstacle::fixed(1, [5.0, 0.3 * z as f64], 0.8)];
            p.duals = Duals::zeros(24, 1, 0, 8);
        }
        let init: Vec<_> = (0..3).map(|z| straight(1.0 + 0.2 * z as f64, 24)).collect();
        let run = |workers| {
            let s = AdmmSolver::new(SolverConfig {
                workers,
                ..Default::default()
            })
            .unwrap();
            let mut r = s.solve(ps.clone(), init.clone()).unwrap();
            r.wall_ms = 0.0;
            r
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let s = AdmmSolver::new(SolverConfig::default()).unwrap();
        assert!(s.solve(vec![], vec![]).is_err());
        assert!(s.solve(problems(2, 2, 4), vec![straight(1.0, 4)]).is_err());
        assert!(AdmmSolver::new(SolverConfig {
            eps_dual: 0.0,
            ..Default::default()
        })
        .is_err());
    }
}
