//! Visibility, occluded regions and risk regions.
//!
//! An obstacle ahead of the robot hides a wedge bounded by the two tangent
//! lines from the robot to the obstacle disk. In the robot body frame the
//! tangents are `y = m1 x` and `y = m2 x` (`m1 >= m2`) and the hidden wedge is
//! `{x : A x < 0}` with
//!
//! ```text
//!     [ -m1   1 ]
//! A = [  m2  -1 ]
//!     [  -1   0 ]
//! ```
//!
//! Risk regions are circles placed along both tangents, starting at the
//! tangency point and spaced `d_risk` apart. Their radius grows with the
//! time the robot needs to get there and the assumed top speed of a hidden
//! obstacle.

use serde::{Deserialize, Serialize};

use crate::error::{CmpcError, Result};
use crate::kinematics::RobotState;

/// Guard on the tangent-slope denominator `x_rel^2 - r^2`, in m^2.
pub const EPS_GEO: f64 = 1e-6;
/// Regularizer on the robot speed in the risk radius.
pub const RISK_SIGMA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Static,
    Dynamic,
}

/// Circular obstacle. Non-circular shapes are wrapped in their bounding
/// circle before they get here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    pub velocity: [f64; 2],
    pub kind: ObstacleKind,
}

impl Obstacle {
    pub fn fixed(id: u32, center: [f64; 2], radius: f64) -> Self {
        Self {
            id,
            center,
            radius,
            velocity: [0.0, 0.0],
            kind: ObstacleKind::Static,
        }
    }

    /// Position after `t` seconds at constant velocity.
    pub fn predict(&self, t: f64) -> [f64; 2] {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
        ]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to the closed segment `a-b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Center line-of-sight visibility within a sensor range.
pub fn is_visible(robot: &RobotState, target: &Obstacle, all: &[Obstacle], sensor_range: f64) -> bool {
    let origin = robot.position();
    if dist(origin, target.center) > sensor_range {
        return false;
    }
    all.iter()
        .filter(|o| o.id != target.id)
        .all(|o| point_segment_distance(o.center, origin, target.center) > o.radius)
}

/// Slopes of the two lines through the origin tangent to the disk of radius
/// `r_obs` centered at `(x_rel, y_rel)`, ordered `m1 >= m2`.
pub fn tangent_slopes(x_rel: f64, y_rel: f64, r_obs: f64) -> Result<(f64, f64)> {
    let d2 = x_rel * x_rel + y_rel * y_rel;
    if d2 <= r_obs * r_obs {
        return Err(CmpcError::DegenerateGeometry(format!(
            "robot inside obstacle disk (d^2={d2}, r={r_obs})"
        )));
    }
    let denom = x_rel * x_rel - r_obs * r_obs;
    if denom.abs() < EPS_GEO {
        return Err(CmpcError::DegenerateGeometry(format!(
            "near-vertical tangent (x_rel^2 - r^2 = {denom})"
        )));
    }
    let root = (d2 - r_obs * r_obs).sqrt();
    let a = (x_rel * y_rel + r_obs * root) / denom;
    let b = (x_rel * y_rel - r_obs * root) / denom;
    Ok(if a >= b { (a, b) } else { (b, a) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccludedRegion {
    pub source_obstacle: u32,
    pub m1: f64,
    pub m2: f64,
    pub boundary_matrix: [[f64; 2]; 3],
    pub robot_pose_at_creation: RobotState,
    /// Source obstacle center, global frame.
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
}

/// Global point expressed in the body frame of `pose`.
pub fn to_body(pose: &RobotState, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.theta.sin_cos();
    let dx = p[0] - pose.p_x;
    let dy = p[1] - pose.p_y;
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Body-frame point of `pose` expressed in the global frame.
pub fn to_global(pose: &RobotState, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.theta.sin_cos();
    [pose.p_x + c * p[0] - s * p[1], pose.p_y + s * p[0] + c * p[1]]
}

impl OccludedRegion {
    /// Distance from the robot to the obstacle center.
    pub fn d_obs(&self) -> f64 {
        dist(self.robot_pose_at_creation.position(), self.obstacle_center)
    }

    /// Strict membership `A x < 0` for a body-frame point.
    pub fn contains_body(&self, p: [f64; 2]) -> bool {
        self.boundary_matrix
            .iter()
            .all(|row| row[0] * p[0] + row[1] * p[1] < 0.0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.contains_body(to_body(&self.robot_pose_at_creation, p))
    }

    pub fn slope(&self, tangent_index: u8) -> f64 {
        if tangent_index == 1 {
            self.m1
        } else {
            self.m2
        }
    }
}

/// Occluded region cast by `obs` as seen from `robot`. Only obstacles fully
/// ahead of the robot (`x_rel > r`) cast a well-formed wedge.
pub fn occluded_region(robot: &RobotState, obs: &Obstacle) -> Result<OccludedRegion> {
    let [x_rel, y_rel] = to_body(robot, obs.center);
    let (m1, m2) = tangent_slopes(x_rel, y_rel, obs.radius)?;
    if x_rel * x_rel - obs.radius * obs.radius < 0.0 || x_rel <= 0.0 {
        return Err(CmpcError::DegenerateGeometry(format!(
            "obstacle {} not ahead of the robot (x_rel={x_rel})",
            obs.id
        )));
    }
    Ok(OccludedRegion {
        source_obstacle: obs.id,
        m1,
        m2,
        boundary_matrix: [[-m1, 1.0], [m2, -1.0], [-1.0, 0.0]],
        robot_pose_at_creation: *robot,
        obstacle_center: obs.center,
        obstacle_radius: obs.radius,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRegion {
    pub center: [f64; 2],
    pub radius: f64,
    /// 1 for the `m1` tangent, 2 for `m2`.
    pub tangent_index: u8,
    pub slot_index: usize,
    pub source_region: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    /// Spacing between consecutive regions on a tangent; `None` uses the
    /// source obstacle radius.
    pub d_risk: Option<f64>,
    /// Regions per tangent line.
    pub per_tangent: usize,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            d_risk: None,
            per_tangent: 2,
        }
    }
}

/// Risk circles along both tangents of `region`.
pub fn risk_regions(
    robot: &RobotState,
    region: &OccludedRegion,
    v_obs_max: f64,
    robot_speed: f64,
    params: &RiskParams,
) -> Result<Vec<RiskRegion>> {
    if !robot_speed.is_finite() || !v_obs_max.is_finite() || v_obs_max < 0.0 {
        return Err(CmpcError::InvalidArgument(format!(
            "bad risk inputs: robot_speed={robot_speed}, v_obs_max={v_obs_max}"
        )));
    }
    let r_obs = region.obstacle_radius;
    let d_obs = dist(robot.position(), region.obstacle_center);
    if d_obs <= r_obs {
        return Err(CmpcError::DegenerateGeometry("robot inside obstacle disk".into()));
    }
    let d_risk = params.d_risk.unwrap_or(r_obs);
    let reach = (d_obs * d_obs - r_obs * r_obs).sqrt();
    let (s, c) = robot.theta.sin_cos();
    let mut out = Vec::with_capacity(2 * params.per_tangent);
    for j in [1u8, 2] {
        let m = region.slope(j);
        let norm = (1.0 + m * m).sqrt();
        let (bx, by) = (1.0 / norm, m / norm);
        let dir = [c * bx - s * by, s * bx + c * by];
        for i in 0..params.per_tangent {
            let scale = i as f64 * d_risk + reach;
            let center = [robot.p_x + scale * dir[0], robot.p_y + scale * dir[1]];
            let radius = dist(center, robot.position()) / (robot_speed.abs() + RISK_SIGMA) * v_obs_max + r_obs;
            out.push(RiskRegion {
                center,
                radius,
                tangent_index: j,
                slot_index: i,
                source_region: region.source_obstacle,
            });
        }
    }
    Ok(out)
}

/// One branch hypothesis about hidden obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// Ignore risk regions entirely.
    Neglect,
    /// Hidden obstacles move at most this fast (m/s).
    MaxObstacleSpeed(f64),
}

impl Hypothesis {
    pub fn v_obs_max(&self) -> Option<f64> {
        match self {
            Hypothesis::Neglect => None,
            Hypothesis::MaxObstacleSpeed(v) => Some(*v),
        }
    }
}

impl std::fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Hypothesis::Neglect => write!(f, "x"),
            Hypothesis::MaxObstacleSpeed(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for Hypothesis {
    type Err = CmpcError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("x") || t.eq_ignore_ascii_case("neglect") {
            return Ok(Hypothesis::Neglect);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| CmpcError::InvalidArgument(format!("bad branch spec {t:?}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(CmpcError::InvalidArgument(format!("bad branch speed {v}")));
        }
        Ok(Hypothesis::MaxObstacleSpeed(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRegionConfig {
    pub hypothesis_index: usize,
    pub hypothesis: Hypothesis,
    pub regions: Vec<RiskRegion>,
}

impl RiskRegionConfig {
    pub fn v_obs_max_assumed(&self) -> Option<f64> {
        self.hypothesis.v_obs_max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigLimits {
    pub max_occluded_regions: usize,
    pub risk: RiskParams,
}

impl Default for ConfigLimits {
    fn default() -> Self {
        Self {
            max_occluded_regions: 2,
            risk: RiskParams::default(),
        }
    }
}

/// Occluded regions of the nearest obstacles (by center distance) that cast
/// a well-formed wedge, at most `limit`.
pub fn nearest_occluded_regions(robot: &RobotState, obstacles: &[Obstacle], limit: usize) -> Vec<OccludedRegion> {
    let mut order: Vec<(f64, usize)> = obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| (robot.distance_to(o.center), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order
        .into_iter()
        .filter_map(|(_, i)| occluded_region(robot, &obstacles[i]).ok())
        .take(limit)
        .collect()
}

/// One risk configuration per hypothesis, built from the visible obstacles.
pub fn build_configurations(
    robot: &RobotState,
    robot_speed: f64,
    visible: &[Obstacle],
    hypotheses: &[Hypothesis],
    limits: &ConfigLimits,
) -> Result<Vec<RiskRegionConfig>> {
    if hypotheses.is_empty() {
        return Err(CmpcError::InvalidArgument("no branch hypotheses".into()));
    }
    let regions = nearest_occluded_regions(robot, visible, limits.max_occluded_regions);
    hypotheses
        .iter()
        .enumerate()
        .map(|(z, h)| {
            let mut out = Vec::new();
            if let Some(v) = h.v_obs_max() {
                for reg in &regions {
                    out.extend(risk_regions(robot, reg, v, robot_speed, &limits.risk)?);
                }
            }
            Ok(RiskRegionConfig {
                hypothesis_index: z,
                hypothesis: *h,
                regions: out,
            })
        })
        .collect()
}
