//! Self-checks run by `cmpc verify`: geometry against ray casting, risk
//! radii against their closed form, analytic gradients against central
//! differences, consensus identities and solver determinism. Every suite is
//! seeded, so repeated runs print identical output.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::admm::{update_consensus, AdmmSolver, SolverConfig};
use crate::geometry::{
    build_configurations, occluded_region, point_segment_distance, risk_regions, tangent_slopes, to_body, to_global,
    ConfigLimits, Hypothesis, Obstacle, RiskParams, RISK_SIGMA,
};
use crate::kinematics::{rollout, ControlInput, RobotState, Trajectory};
use crate::problem::{
    evaluate_with, g_obs, g_risk, objective_with, pack, unpack, BranchProblem, ConsensusState, CostWeights, Duals,
    Penalties, PenaltyRule,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, cases: usize, failures: usize, worst: f64, tol: f64) -> Self {
        Self {
            name,
            passed: failures == 0,
            cases,
            detail: format!("{failures} failures, worst {worst:.3e} (tolerance {tol:.0e})"),
        }
    }
}

/// Robot pose and an obstacle strictly ahead of it, clear of the
/// near-vertical tangent case.
fn ahead_case(rng: &mut ChaCha8Rng) -> (RobotState, Obstacle) {
    loop {
        let robot = RobotState::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.1..3.1));
        let r = rng.gen_range(0.2..1.5);
        let body: [f64; 2] = [rng.gen_range(0.0..8.0), rng.gen_range(-6.0..6.0)];
        if body[0] - r < 0.05 || body[0].hypot(body[1]) < r + 0.1 {
            continue;
        }
        return (robot, Obstacle::fixed(1, to_global(&robot, body), r));
    }
}

pub fn tangent_distance(cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let (robot, obs) = ahead_case(&mut rng);
        let [x, y] = to_body(&robot, obs.center);
        let Ok((m1, m2)) = tangent_slopes(x, y, obs.radius) else {
            failures += 1;
            continue;
        };
        for m in [m1, m2] {
            let d = (m * x - y).abs() / (1.0 + m * m).sqrt();
            let e = (d - obs.radius).abs();
            worst = worst.max(e);
            if e > 1e-9 {
                failures += 1;
            }
        }
        if m1 < m2 {
            failures += 1;
        }
    }
    CheckResult::new("tangent lines touch the obstacle disk", cases, failures, worst, 1e-9)
}

/// Membership of points behind the obstacle against casting a ray from the
/// robot through the disk. The wedge also contains points in front of the
/// disk near the tangents, so only points beyond its far edge are compared.
pub fn occlusion_ray_cast(cases: usize, points: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..cases {
        let (robot, obs) = ahead_case(&mut rng);
        let Ok(reg) = occluded_region(&robot, &obs) else {
            failures += 1;
            continue;
        };
        // rear points: farther from the robot than any point of the disk,
        // where the wedge coincides with the shadow
        let far = reg.d_obs() + obs.radius;
        let mut checked = 0;
        while checked < points {
            let (rho, phi) = (rng.gen_range(far..far + 10.0), rng.gen_range(-PI..PI));
            let p = to_global(&robot, [rho * phi.cos(), rho * phi.sin()]);
            let gap = point_segment_distance(obs.center, robot.position(), p) - obs.radius;
            // grazing rays are ambiguous at floating point resolution
            if gap.abs() < 1e-9 {
                continue;
            }
            checked += 1;
            if reg.contains(p) != (gap < 0.0) {
                failures += 1;
            }
        }
    }
    CheckResult {
        name: "occluded region matches ray casting",
        passed: failures == 0,
        cases: cases * points,
        detail: format!("{failures} disagreements"),
    }
}

pub fn risk_formulas(cases: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = RiskParams::default();
    let (mut zero_fail, mut lin_fail, mut range_fail, mut form_fail) = (0, 0, 0, 0);
    let (mut lin_worst, mut range_worst, mut form_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (robot, obs) = ahead_case(&mut rng);
        let reg = occluded_region(&robot, &obs).expect("case is ahead");
        let speed = rng.gen_range(0.0..2.5);
        let v = rng.gen_range(0.1..2.0);
        let at = |vmax: f64| risk_regions(&robot, &reg, vmax, speed, &params).expect("valid inputs");
        if at(0.0).iter().any(|r| r.radius != obs.radius) {
            zero_fail += 1;
        }
        let (one, two) = (at(v), at(2.0 * v));
        let reach = (reg.d_obs().powi(2) - obs.radius.powi(2)).sqrt();
        for (a, b) in one.iter().zip(&two) {
            let e = ((b.radius - obs.radius) - 2.0 * (a.radius - obs.radius)).abs();
            lin_worst = lin_worst.max(e);
            if e > 1e-12 * (1.0 + b.radius) {
                lin_fail += 1;
            }
            let expect = robot.distance_to(a.center) / (speed + RISK_SIGMA) * v + obs.radius;
            let e = (a.radius - expect).abs();
            form_worst = form_worst.max(e);
            if e > 1e-9 * expect.max(1.0) || a.radius < obs.radius {
                form_fail += 1;
            }
            if a.slot_index == 0 {
                let e = (robot.distance_to(a.center) - reach).abs();
                range_worst = range_worst.max(e);
                if e > 1e-9 {
                    range_fail += 1;
                }
            }
        }
    }
    vec![
        CheckResult::new("zero obstacle speed gives the obstacle radius", cases, zero_fail, 0.0, 0.0),
        CheckResult::new("risk radius grows linearly with obstacle speed", cases, lin_fail, lin_worst, 1e-12),
        CheckResult::new("first risk center sits at the tangent point range", cases, range_fail, range_worst, 1e-9),
        CheckResult::new("risk radius matches its closed form", cases, form_fail, form_worst, 1e-9),
    ]
}

/// Distance of every inequality residual from its kink.
fn min_kink_gap(p: &BranchProblem, tr: &Trajectory) -> f64 {
    let mut m = f64::INFINITY;
    for rows in [g_obs(tr, &p.obstacles), g_risk(tr, &p.config)] {
        for g in rows.iter().skip(1).flatten() {
            m = m.min(g.abs());
        }
    }
    for u in &tr.controls {
        for e in [u.v - p.limits.v_max, p.limits.v_min - u.v, u.omega.abs() - p.limits.omega_max] {
            m = m.min(e.abs());
        }
    }
    m
}

/// Random branch problem with obstacles, risk regions, randomized duals
/// and penalties, and a consensus segment that disagrees with the
/// trajectory.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, nc: usize) -> (BranchProblem, Trajectory, ConsensusState) {
    let s0 = RobotState::new(0.0, 0.0, rng.gen_range(-0.5..0.5));
    let controls: Vec<ControlInput> = (0..n)
        .map(|_| ControlInput::new(rng.gen_range(-0.8..2.8), rng.gen_range(-1.7..1.7)))
        .collect();
    let mut tr = rollout(&s0, &controls, 0.25).expect("finite");
    for s in tr.states.iter_mut().skip(1) {
        s.p_x += rng.gen_range(-0.3..0.3);
        s.p_y += rng.gen_range(-0.3..0.3);
        s.theta += rng.gen_range(-0.3..0.3);
    }
    let mut obstacles: Vec<Obstacle> = (0..3)
        .map(|i| Obstacle::fixed(i, [rng.gen_range(1.0..6.0), rng.gen_range(-3.0..3.0)], rng.gen_range(0.3..1.0)))
        .collect();
    obstacles[0].velocity = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let hyp = Hypothesis::MaxObstacleSpeed(rng.gen_range(0.2..1.0));
    let config = build_configurations(&s0, 1.8, &obstacles, &[hyp], &ConfigLimits::default())
        .expect("one hypothesis")
        .remove(0);
    let weights = CostWeights {
        guide_point: [rng.gen_range(4.0..11.0), rng.gen_range(-2.0..2.0)],
        v_ref: rng.gen_range(0.5..2.0),
        ..Default::default()
    };
    let mut p = BranchProblem::new(s0, ControlInput::new(rng.gen_range(0.0..2.0), 0.0), config, obstacles, weights, n, 0.25, nc)
        .expect("valid shape");
    p.penalties = Penalties {
        obs: rng.gen_range(0.0..2.0),
        risk: rng.gen_range(0.0..2.0),
        kin: rng.gen_range(0.0..2.0),
        cons: rng.gen_range(0.0..2.0),
    };
    for l in p.duals.obs.iter_mut().chain(p.duals.risk.iter_mut()) {
        *l = rng.gen_range(0.0..2.0);
    }
    for l in p.duals.kin.iter_mut().flatten() {
        *l = rng.gen_range(-2.0..2.0);
    }
    for l in p.duals.cons.iter_mut().flatten() {
        *l = rng.gen_range(-2.0..2.0);
    }
    let other = rollout(&s0, &vec![ControlInput::new(1.0, 0.1); n], 0.25).expect("finite");
    let cons = ConsensusState::from_prefix(&other, nc);
    (p, tr, cons)
}

/// Analytic gradient against central differences at random points whose
/// residuals all stay at least `KINK_GAP` away from a penalty kink.
pub fn gradient_check(cases: usize) -> CheckResult {
    const KINK_GAP: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // objective values reach 1e5 on random instances; a smaller step lets
    // cancellation error dominate
    let h = 1e-5;
    let (mut failures, mut worst, mut done) = (0, 0.0f64, 0);
    while done < cases {
        let (p, tr, cons) = random_instance(&mut rng, 12, 4);
        if min_kink_gap(&p, &tr) < KINK_GAP {
            continue;
        }
        done += 1;
        for rule in [PenaltyRule::Violated, PenaltyRule::ViolatedOrPriced] {
            let g = evaluate_with(&p, &tr, &cons, false, rule).gradient;
            let z = pack(&tr);
            for i in 0..z.len() {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fp = objective_with(&p, &unpack(&zp, &tr.states[0], tr.dt), &cons, rule);
                let fm = objective_with(&p, &unpack(&zm, &tr.states[0], tr.dt), &cons, rule);
                let fd = (fp - fm) / (2.0 * h);
                let e = (fd - g[i]).abs() / fd.abs().max(1.0);
                worst = worst.max(e);
                if e >= 1e-5 {
                    failures += 1;
                }
            }
        }
    }
    CheckResult::new("analytic gradient matches central differences", cases, failures, worst, 1e-5)
}

/// Consensus multiplier steps sum to zero across branches.
pub fn dual_increment_identity(cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let nz = rng.gen_range(2..5);
        let nc = rng.gen_range(1..9);
        let mut problems = Vec::new();
        let mut trajs = Vec::new();
        for _ in 0..nz {
            let (mut p, tr, _) = random_instance(&mut rng, 10, nc);
            p.duals.cons = vec![[0.0; 5]; nc];
            p.penalties.cons = 1.0;
            problems.push(p);
            trajs.push(tr);
        }
        let (_, duals) = update_consensus(&trajs, &problems);
        for k in 0..nc {
            for c in 0..5 {
                let s: f64 = duals.iter().map(|d| d[k][c]).sum();
                worst = worst.max(s.abs());
                if s.abs() > 1e-12 {
                    failures += 1;
                }
            }
        }
    }
    CheckResult::new("consensus multiplier steps sum to zero", cases, failures, worst, 1e-12)
}

/// Same branch problems solved with one and with four workers.
pub fn worker_determinism(cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for _ in 0..cases {
        let mut problems = Vec::new();
        let mut init = Vec::new();
        let (base, tr, _) = random_instance(&mut rng, 16, 4);
        for z in 0..3 {
            let mut p = base.clone();
            p.duals = Duals::zeros(16, p.obstacles.len(), p.config.regions.len(), 4);
            p.config.hypothesis_index = z;
            if z == 0 {
                p.config.regions.clear();
                p.duals.risk.clear();
            }
            problems.push(p);
            init.push(tr.clone());
        }
        let solve = |workers| {
            let cfg = SolverConfig {
                workers,
                max_iters: 20,
                ..Default::default()
            };
            AdmmSolver::new(cfg).and_then(|s| s.solve(problems.clone(), init.clone())).map(|mut r| {
                r.wall_ms = 0.0;
                r
            })
        };
        if solve(1) != solve(4) {
            failures += 1;
        }
    }
    CheckResult {
        name: "solver output independent of worker count",
        passed: failures == 0,
        cases,
        detail: format!("{failures} mismatches"),
    }
}

/// All suites at their default sizes.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = vec![tangent_distance(1000), occlusion_ray_cast(1000, 100)];
    out.extend(risk_formulas(1000));
    out.push(gradient_check(100));
    out.push(dual_increment_identity(200));
    out.push(worker_determinism(5));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(tangent_distance(50).passed);
        assert!(occlusion_ray_cast(20, 20).passed);
        assert!(risk_formulas(50).iter().all(|c| c.passed));
        let g = gradient_check(5);
        assert!(g.passed, "{}", g.detail);
        assert!(dual_increment_identity(20).passed);
        assert!(worker_determinism(1).passed);
    }
}
