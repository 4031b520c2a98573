//! Deterministic closed-loop 2D world.
//!
//! The world holds the robot and a set of circular obstacles. Dynamic
//! obstacles sit still until the robot comes within their activation
//! distance, then move at constant velocity for the rest of the episode.
//! The robot senses obstacles by center line-of-sight within a sensor
//! range, plans once per control period and integrates the applied control
//! over fine substeps.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmpcError, Result};
use crate::geometry::{is_visible, Obstacle, ObstacleKind};
use crate::kinematics::{step, wrap_angle, ControlInput, RobotState, Trajectory};
use crate::planner::{Observation, Planner, PlannerConfig};

pub const SCENARIO_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Circle { radius: f64 },
    /// Axis-aligned box given by its half extents; wrapped in its bounding
    /// circle for all geometry.
    Box { half_x: f64, half_y: f64 },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Circle { radius } => radius,
            Shape::Box { half_x, half_y } => half_x.hypot(half_y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Center-to-center distance at which the obstacle starts moving, m.
    pub activation_distance: f64,
    /// Velocity once active, m/s.
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub id: u32,
    pub center: [f64; 2],
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<Trigger>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub half_length: f64,
    pub half_width: f64,
}

impl Footprint {
    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }
}

/// Seeded perturbation of dynamic obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedPerturbation {
    /// Speed range for triggered obstacles, m/s.
    pub speed_range: [f64; 2],
    /// Trigger timing jitter, s; applied as an activation distance offset of
    /// `jitter * v_ref`.
    pub trigger_jitter: f64,
}

impl Default for SeedPerturbation {
    fn default() -> Self {
        Self {
            speed_range: [0.6, 1.0],
            trigger_jitter: 0.1,
        }
    }
}

/// Planner settings that belong to a scenario rather than to the method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerTuning {
    /// Clearance kept between the robot's bounding circle and obstacles or
    /// risk regions, m.
    pub clearance: f64,
    /// Overrides the kinematic penalty coefficient.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kin_penalty: Option<f64>,
}

impl Default for PlannerTuning {
    fn default() -> Self {
        Self {
            clearance: 0.1,
            kin_penalty: None,
        }
    }
}

fn default_substep() -> f64 {
    0.02
}

fn default_goal_tolerance() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub robot_start: RobotState,
    pub robot_footprint: Footprint,
    pub obstacles: Vec<ObstacleSpec>,
    pub guide_path: Vec<[f64; 2]>,
    pub v_ref: f64,
    pub sensor_range: f64,
    pub dt: f64,
    pub max_time: f64,
    /// Top speed of any dynamic obstacle, m/s.
    pub v_obs_max_true: f64,
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<SeedPerturbation>,
    #[serde(default)]
    pub tuning: PlannerTuning,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmpcError::Config(format!("scenario {:?}: {m}", self.name)));
        if self.schema != SCENARIO_SCHEMA {
            return bad(format!("unsupported schema {}", self.schema));
        }
        if self.guide_path.is_empty() {
            return bad("empty guide path".into());
        }
        if !(self.dt > 0.0 && self.substep > 0.0 && self.max_time > 0.0) {
            return bad("time parameters must be positive".into());
        }
        if !(self.v_ref > 0.0) || !(self.sensor_range > 0.0) {
            return bad("v_ref and sensor_range must be positive".into());
        }
        let mut ids: Vec<u32> = self.obstacles.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate obstacle ids".into());
        }
        if !(self.tuning.clearance >= 0.0) || self.tuning.kin_penalty.is_some_and(|k| !(k > 0.0)) {
            return bad("tuning values out of range".into());
        }
        for o in &self.obstacles {
            if !(o.shape.bounding_radius() > 0.0) {
                return bad(format!("obstacle {} has non-positive size", o.id));
            }
            if let Some(t) = o.trigger {
                if !(t.activation_distance > 0.0) {
                    return bad(format!("obstacle {} activation distance must be positive", o.id));
                }
                let speed = t.velocity[0].hypot(t.velocity[1]);
                let top = self.perturbation.map_or(speed, |p| p.speed_range[1].max(speed));
                if top > self.v_obs_max_true + 1e-12 {
                    return bad(format!("obstacle {} may exceed v_obs_max_true", o.id));
                }
            }
        }
        Ok(())
    }

    /// `base` adapted to this scenario: time step, cruise speed, inflation by
    /// the robot's bounding radius plus clearance, and any tuning override.
    pub fn configure(&self, base: &PlannerConfig) -> PlannerConfig {
        let mut cfg = base.clone();
        cfg.dt = self.dt;
        cfg.weights.v_ref = self.v_ref;
        cfg.inflation = self.robot_footprint.bounding_radius() + self.tuning.clearance;
        if let Some(k) = self.tuning.kin_penalty {
            cfg.penalties.kin = k;
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmpcError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let s: Scenario = serde_json::from_str(&text)
            .map_err(|e| CmpcError::Config(format!("cannot parse scenario {}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("scenario serializes");
        std::fs::write(path, text + "\n").map_err(|e| CmpcError::Config(format!("cannot write {}: {e}", path.display())))
    }

    /// Straight path along +x with no obstacles.
    pub fn empty(length: f64) -> Self {
        Self {
            schema: SCENARIO_SCHEMA,
            name: "empty".into(),
            robot_start: RobotState::new(0.0, 0.0, 0.0),
            robot_footprint: Footprint {
                half_length: 0.4,
                half_width: 0.2,
            },
            obstacles: vec![],
            guide_path: vec![[0.0, 0.0], [length, 0.0]],
            v_ref: 1.8,
            sensor_range: 10.0,
            dt: 0.25,
            // cruise time plus the approach, which decays exponentially
            // over the last horizon
            max_time: length / 1.8 + 30.0,
            v_obs_max_true: 1.0,
            substep: 0.02,
            goal_tolerance: 0.5,
            perturbation: None,
            tuning: PlannerTuning::default(),
        }
    }

    /// Occluded lane: three 1.5 m blocks on the left of a 56 m lane along +x,
    /// open ground on the right, and one more block parked in the shadow of
    /// the middle occluder that darts across the lane once the robot is
    /// within 2 m of it.
    pub fn canonical() -> Self {
        let block = Shape::Box {
            half_x: 0.75,
            half_y: 0.75,
        };
        let fixed = |id, c: [f64; 2]| ObstacleSpec {
            id,
            center: c,
            shape: block,
            trigger: None,
        };
        Self {
            name: "occluded_lane".into(),
            obstacles: vec![
                fixed(1, [15.0, 2.8]),
                fixed(2, [24.0, 2.2]),
                fixed(3, [33.0, 3.0]),
                ObstacleSpec {
                    id: 4,
                    center: [26.5, 1.9],
                    shape: block,
                    trigger: Some(Trigger {
                        activation_distance: 2.0,
                        velocity: [0.0, -0.8],
                    }),
                },
            ],
            max_time: 60.0,
            perturbation: Some(SeedPerturbation::default()),
            // the default kinematic penalty leaves the solver free to trade
            // dynamic feasibility for progress in this layout
            tuning: PlannerTuning {
                kin_penalty: Some(30.0),
                ..Default::default()
            },
            ..Self::empty(56.0)
        }
    }
}

/// Nearest point on a polyline: returns (point, arc length, segment index).
pub fn project_on_path(path: &[[f64; 2]], p: [f64; 2]) -> ([f64; 2], f64, usize) {
    if path.len() == 1 {
        return (path[0], 0.0, 0);
    }
    let mut best = (f64::INFINITY, path[0], 0.0, 0);
    let mut s0 = 0.0;
    for (i, w) in path.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len = ab[0].hypot(ab[1]);
        let t = if len > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        if d < best.0 {
            best = (d, q, s0 + t * len, i);
        }
        s0 += len;
    }
    (best.1, best.2, best.3)
}

/// Point at arc length `s` along the path, clamped to its ends.
pub fn point_at(path: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut left = s.max(0.0);
    for w in path.windows(2) {
        let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        if left <= len && len > 0.0 {
            let t = left / len;
            return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
        }
        left -= len;
    }
    path[path.len() - 1]
}

/// Heading of the path segment nearest to `p`.
pub fn path_heading(path: &[[f64; 2]], p: [f64; 2]) -> f64 {
    if path.len() < 2 {
        return 0.0;
    }
    let (_, _, i) = project_on_path(path, p);
    let (a, b) = (path[i], path[i + 1]);
    (b[1] - a[1]).atan2(b[0] - a[0])
}

/// Reference speed for a robot `remaining` meters from the goal: cruise
/// speed until the goal is less than one horizon away, then the speed that
/// covers the remaining distance in exactly one horizon. A constant-speed
/// plan then ends on the goal instead of circling it.
pub fn approach_speed(v_ref: f64, remaining: f64, horizon_time: f64) -> f64 {
    v_ref.min(remaining.max(0.0) / horizon_time)
}

/// Guidance point: `lookahead` meters of arc length past the robot's
/// projection onto the path, clamped to the path end.
pub fn guide_point(path: &[[f64; 2]], p: [f64; 2], lookahead: f64) -> [f64; 2] {
    let (_, s, _) = project_on_path(path, p);
    point_at(path, s + lookahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObstacle {
    pub id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    /// Velocity once active.
    pub velocity: [f64; 2],
    pub activation_distance: Option<f64>,
    pub active: bool,
    pub visible: bool,
}

impl WorldObstacle {
    pub fn current_velocity(&self) -> [f64; 2] {
        if self.active {
            self.velocity
        } else {
            [0.0, 0.0]
        }
    }

    pub fn as_obstacle(&self) -> Obstacle {
        Obstacle {
            id: self.id,
            center: self.center,
            radius: self.radius,
            velocity: self.current_velocity(),
            kind: if self.activation_distance.is_some() {
                ObstacleKind::Dynamic
            } else {
                ObstacleKind::Static
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub time: f64,
    pub robot: RobotState,
    pub control: ControlInput,
    pub robot_radius: f64,
    pub obstacles: Vec<WorldObstacle>,
    pub dt: f64,
    pub substep: f64,
    pub sensor_range: f64,
    /// Set once any substep ends in collision.
    pub collided: bool,
}

impl World {
    /// Instantiates `scenario`; `seed` perturbs dynamic obstacle speeds and
    /// trigger distances when the scenario enables it.
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obstacles = scenario
            .obstacles
            .iter()
            .map(|o| {
                let (velocity, activation_distance) = match (o.trigger, scenario.perturbation) {
                    (Some(t), Some(p)) => {
                        let speed = t.velocity[0].hypot(t.velocity[1]);
                        let target = rng.gen_range(p.speed_range[0]..=p.speed_range[1]);
                        let scale = if speed > 0.0 { target / speed } else { 0.0 };
                        let jitter = rng.gen_range(-p.trigger_jitter..=p.trigger_jitter);
                        (
                            [t.velocity[0] * scale, t.velocity[1] * scale],
                            Some((t.activation_distance + jitter * scenario.v_ref).max(1e-3)),
                        )
                    }
                    (Some(t), None) => (t.velocity, Some(t.activation_distance)),
                    (None, _) => ([0.0, 0.0], None),
                };
                WorldObstacle {
                    id: o.id,
                    center: o.center,
                    radius: o.shape.bounding_radius(),
                    velocity,
                    activation_distance,
                    active: false,
                    visible: false,
                }
            })
            .collect();
        let mut w = World {
            time: 0.0,
            robot: scenario.robot_start,
            control: ControlInput::default(),
            robot_radius: scenario.robot_footprint.bounding_radius(),
            obstacles,
            dt: scenario.dt,
            substep: scenario.substep,
            sensor_range: scenario.sensor_range,
            collided: false,
        };
        w.update_triggers();
        w.update_visibility();
        w
    }

    fn update_triggers(&mut self) {
        let p = self.robot.position();
        for o in &mut self.obstacles {
            if let Some(d) = o.activation_distance {
                if !o.active && (o.center[0] - p[0]).hypot(o.center[1] - p[1]) <= d {
                    o.active = true;
                }
            }
        }
    }

    fn update_visibility(&mut self) {
        let all: Vec<Obstacle> = self.obstacles.iter().map(|o| o.as_obstacle()).collect();
        for (o, ob) in self.obstacles.iter_mut().zip(&all) {
            o.visible = is_visible(&self.robot, ob, &all, self.sensor_range);
        }
    }

    /// True iff the robot's bounding circle overlaps an obstacle's.
    pub fn check_collision(&self) -> bool {
        let p = self.robot.position();
        self.obstacles
            .iter()
            .any(|o| (o.center[0] - p[0]).hypot(o.center[1] - p[1]) < o.radius + self.robot_radius)
    }

    /// Advances one control period with `u` held constant.
    pub fn tick(&mut self, u: ControlInput) -> Result<()> {
        let n = (self.dt / self.substep).ceil().max(1.0) as usize;
        let h = self.dt / n as f64;
        self.control = u;
        for _ in 0..n {
            self.robot = step(&self.robot, &u, h)?;
            for o in &mut self.obstacles {
                if o.active {
                    o.center[0] += o.velocity[0] * h;
                    o.center[1] += o.velocity[1] * h;
                }
            }
            self.update_triggers();
            if self.check_collision() {
                self.collided = true;
            }
        }
        self.time += self.dt;
        self.update_visibility();
        Ok(())
    }

    pub fn visible_obstacles(&self) -> Vec<Obstacle> {
        self.obstacles.iter().filter(|o| o.visible).map(|o| o.as_obstacle()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleRecord {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub active: bool,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub converged: bool,
    pub solve_ms: f64,
    pub max_grad: f64,
    pub max_primal: f64,
    pub consensus_change: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub state: RobotState,
    pub control: ControlInput,
    pub v_lat: f64,
    pub obstacles: Vec<ObstacleRecord>,
    pub branches: Vec<Vec<[f64; 3]>>,
    pub risk_regions: usize,
    pub solve: SolveSummary,
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalReached,
    Collision,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub scenario: String,
    pub planner: String,
    pub seed: u64,
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    pub planner_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
struct CsvRow {
    time: f64,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
    omega: f64,
    v_lat: f64,
    branch_count: usize,
    solve_ms: f64,
    collision_flag: u8,
}

impl SimLog {
    pub fn collided(&self) -> bool {
        self.termination == Termination::Collision
    }

    /// Drops wall-clock timings so logs compare byte for byte.
    pub fn without_timing(mut self) -> Self {
        for r in &mut self.records {
            r.solve.solve_ms = 0.0;
        }
        self
    }

    /// Newline-delimited JSON: a header line, then one line per step.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "scenario": self.scenario,
            "planner": self.planner,
            "seed": self.seed,
            "dt": self.dt,
            "termination": self.termination,
            "planner_failures": self.planner_failures,
        });
        writeln!(out, "{header}")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(CsvRow {
                time: r.time,
                x: r.state.p_x,
                y: r.state.p_y,
                theta: r.state.theta,
                v: r.control.v,
                omega: r.control.omega,
                v_lat: r.v_lat,
                branch_count: r.branches.len(),
                solve_ms: r.solve.solve_ms,
                collision_flag: r.collision as u8,
            })
            .map_err(|e| CmpcError::Config(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| CmpcError::Config(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Lateral velocity relative to the path: `v sin(theta - theta_path)`.
pub fn lateral_velocity_at(path: &[[f64; 2]], s: &RobotState, u: &ControlInput) -> f64 {
    u.v * wrap_angle(s.theta - path_heading(path, s.position())).sin()
}

/// Ramp used when the planner fails: halve speed, stop turning.
pub fn safety_stop(prev: ControlInput) -> ControlInput {
    let v = if prev.v.abs() < 0.05 { 0.0 } else { 0.5 * prev.v };
    ControlInput::new(v, 0.0)
}

/// Runs one closed-loop episode.
pub fn run_episode(scenario: &Scenario, planner: &mut Planner, label: &str, seed: u64) -> Result<SimLog> {
    scenario.validate()?;
    let cfg = planner.config().clone();
    if (cfg.dt - scenario.dt).abs() > 1e-12 {
        return Err(CmpcError::Config(format!(
            "planner dt {} differs from scenario dt {}",
            cfg.dt, scenario.dt
        )));
    }
    planner.reset();
    // time to the terminal state, which is the one pulled to the guide
    let reach = (cfg.horizon - 1) as f64 * cfg.dt;
    let lookahead = scenario.v_ref * reach;
    let goal = scenario.guide_path[scenario.guide_path.len() - 1];
    let mut world = World::new(scenario, seed);
    let mut records = Vec::new();
    let mut failures = 0;
    let termination = loop {
        if world.robot.distance_to(goal) <= scenario.goal_tolerance {
            break Termination::GoalReached;
        }
        if world.time >= scenario.max_time - 1e-9 {
            break Termination::TimeLimit;
        }
        let obs = Observation {
            state: world.robot,
            prev_control: world.control,
            visible: world.visible_obstacles(),
            guide_point: guide_point(&scenario.guide_path, world.robot.position(), lookahead),
            v_ref: approach_speed(scenario.v_ref, world.robot.distance_to(goal), reach),
        };
        let (u, branches, risk_regions, solve) = match planner.plan(&obs) {
            Ok(out) => {
                let r = &out.report;
                let branches = r
                    .trajectories
                    .iter()
                    .map(|t: &Trajectory| t.states.iter().map(|s| [s.p_x, s.p_y, s.theta]).collect())
                    .collect();
                let summary = SolveSummary {
                    iterations: r.iterations,
                    converged: r.converged,
                    solve_ms: r.wall_ms,
                    max_grad: r.branches.iter().map(|b| b.grad_norm).fold(0.0, f64::max),
                    max_primal: r.branches.iter().map(|b| b.primal).fold(0.0, f64::max),
                    consensus_change: r.consensus_dual_residual,
                    failure: None,
                };
                let nr = out.configs.iter().map(|c| c.regions.len()).sum();
                (cfg.limits.clamp(r.applied_control), branches, nr, summary)
            }
            Err(e) => {
                failures += 1;
                log::warn!("t={:.2}: planner failure, safety stop: {e}", world.time);
                let summary = SolveSummary {
                    iterations: 0,
                    converged: false,
                    solve_ms: 0.0,
                    max_grad: f64::NAN,
                    max_primal: f64::NAN,
                    consensus_change: f64::NAN,
                    failure: Some(e.to_string()),
                };
                (safety_stop(world.control), vec![], 0, summary)
            }
        };
        let state = world.robot;
        let time = world.time;
        world.tick(u)?;
        records.push(StepRecord {
            time,
            state,
            control: u,
            v_lat: lateral_velocity_at(&scenario.guide_path, &state, &u),
            obstacles: world
                .obstacles
                .iter()
                .map(|o| ObstacleRecord {
                    id: o.id,
                    x: o.center[0],
                    y: o.center[1],
                    active: o.active,
                    visible: o.visible,
                })
                .collect(),
            branches,
            risk_regions,
            solve,
            collision: world.collided,
        });
        if world.collided {
            break Termination::Collision;
        }
    };
    Ok(SimLog {
        scenario: scenario.name.clone(),
        planner: label.to_string(),
        seed,
        dt: scenario.dt,
        records,
        termination,
        planner_failures: failures,
    })
}
