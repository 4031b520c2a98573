//! Consistency metrics, baseline runs and the consensus-length sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CmpcError, Result};
use crate::kinematics::{ControlInput, RobotState};
use crate::planner::{BaselineKind, Planner, PlannerConfig};
use crate::sim::{lateral_velocity_at, run_episode, Scenario, SimLog, Termination};

/// Window of the lateral velocity range metric, seconds.
pub const CONSISTENCY_WINDOW: f64 = 1.0;

/// Consensus lengths of the ablation sweep, seconds.
pub const SWEEP_SECONDS: [f64; 4] = [0.0, 1.0, 2.0, 5.0];

/// Lateral velocity along a logged series relative to the local path
/// direction.
pub fn lateral_velocity(series: &[(RobotState, ControlInput)], path: &[[f64; 2]]) -> Vec<f64> {
    series.iter().map(|(s, u)| lateral_velocity_at(path, s, u)).collect()
}

/// `(max windowed range, peak rate)` of a lateral velocity series sampled
/// every `dt`. The range is taken over every window spanning
/// [`CONSISTENCY_WINDOW`] seconds, endpoints included; a series shorter than
/// one window is treated as a single window.
pub fn consistency_metrics(v_lat: &[f64], dt: f64) -> (f64, f64) {
    if v_lat.is_empty() {
        return (0.0, 0.0);
    }
    let span = ((CONSISTENCY_WINDOW / dt).round() as usize).max(1);
    let mut range: f64 = 0.0;
    for start in 0..v_lat.len() {
        let w = &v_lat[start..(start + span + 1).min(v_lat.len())];
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        range = range.max(hi - lo);
        if start + span >= v_lat.len() {
            break;
        }
    }
    let acc = v_lat.windows(2).map(|w| (w[1] - w[0]).abs() / dt).fold(0.0, f64::max);
    (range, acc)
}

/// Per-episode metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub collision: bool,
    pub termination: Termination,
    /// Largest peak-to-peak lateral velocity over 1 s windows, m/s.
    pub max_lat_vel_variance: f64,
    /// Largest lateral velocity change per control period, m/s^2.
    pub peak_lat_acc: f64,
    /// Mean wall time of successful planning cycles.
    pub avg_solve_ms: f64,
    pub episode_length_s: f64,
    pub cycles: usize,
    pub converged_cycles: usize,
    pub planner_failures: usize,
}

pub fn episode_metrics(log: &SimLog) -> MetricsReport {
    let v_lat: Vec<f64> = log.records.iter().map(|r| r.v_lat).collect();
    let (range, acc) = consistency_metrics(&v_lat, log.dt);
    let solved: Vec<f64> = log
        .records
        .iter()
        .filter(|r| r.solve.failure.is_none())
        .map(|r| r.solve.solve_ms)
        .collect();
    MetricsReport {
        seed: log.seed,
        collision: log.collided(),
        termination: log.termination,
        max_lat_vel_variance: range,
        peak_lat_acc: acc,
        avg_solve_ms: if solved.is_empty() {
            0.0
        } else {
            solved.iter().sum::<f64>() / solved.len() as f64
        },
        episode_length_s: log.records.len() as f64 * log.dt,
        cycles: log.records.len(),
        converged_cycles: log.records.iter().filter(|r| r.solve.converged).count(),
        planner_failures: log.planner_failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(xs: impl Iterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.collect();
        if xs.is_empty() {
            return Self { mean: 0.0, min: 0.0, max: 0.0 };
        }
        Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Seed-aggregated metrics for one planner on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub planner: String,
    pub scenario: String,
    pub consensus_len: usize,
    pub seeds: usize,
    pub collisions: usize,
    pub goals_reached: usize,
    pub max_lat_vel_variance: Spread,
    pub peak_lat_acc: Spread,
    /// Mean over all successful cycles of all episodes.
    pub avg_solve_ms: f64,
    pub episode_length_s: Spread,
    pub cycles: usize,
    pub converged_cycles: usize,
    pub planner_failures: usize,
}

impl AggregateReport {
    pub fn from_episodes(planner: &str, scenario: &str, consensus_len: usize, eps: &[MetricsReport]) -> Self {
        let ok_cycles: usize = eps.iter().map(|m| m.cycles - m.planner_failures).sum();
        let solve_total: f64 = eps.iter().map(|m| m.avg_solve_ms * (m.cycles - m.planner_failures) as f64).sum();
        Self {
            planner: planner.to_string(),
            scenario: scenario.to_string(),
            consensus_len,
            seeds: eps.len(),
            collisions: eps.iter().filter(|m| m.collision).count(),
            goals_reached: eps.iter().filter(|m| m.termination == Termination::GoalReached).count(),
            max_lat_vel_variance: Spread::of(eps.iter().map(|m| m.max_lat_vel_variance)),
            peak_lat_acc: Spread::of(eps.iter().map(|m| m.peak_lat_acc)),
            avg_solve_ms: if ok_cycles == 0 { 0.0 } else { solve_total / ok_cycles as f64 },
            episode_length_s: Spread::of(eps.iter().map(|m| m.episode_length_s)),
            cycles: eps.iter().map(|m| m.cycles).sum(),
            converged_cycles: eps.iter().map(|m| m.converged_cycles).sum(),
            planner_failures: eps.iter().map(|m| m.planner_failures).sum(),
        }
    }

    pub fn converged_fraction(&self) -> f64 {
        if self.cycles == 0 {
            1.0
        } else {
            self.converged_cycles as f64 / self.cycles as f64
        }
    }
}

pub struct EpisodeResult {
    pub log: SimLog,
    pub metrics: MetricsReport,
}

pub struct BaselineRun {
    pub episodes: Vec<EpisodeResult>,
    pub aggregate: AggregateReport,
}

/// Planner configuration for `kind` on `scenario` starting from `base`.
pub fn planner_config(kind: BaselineKind, scenario: &Scenario, base: &PlannerConfig) -> PlannerConfig {
    scenario.configure(&kind.configure(base))
}

/// Runs `kind` on every seed, up to `jobs` episodes at a time. Results are
/// ordered by seed position and do not depend on `jobs`.
pub fn run_baseline(
    kind: BaselineKind,
    scenario: &Scenario,
    base: &PlannerConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<BaselineRun> {
    let cfg = planner_config(kind, scenario, base);
    run_with_config(kind.name(), &cfg, scenario, seeds, jobs)
}

fn run_with_config(label: &str, cfg: &PlannerConfig, scenario: &Scenario, seeds: &[u64], jobs: usize) -> Result<BaselineRun> {
    scenario.validate()?;
    cfg.validate()?;
    let one = |seed: u64| -> Result<EpisodeResult> {
        let mut planner = Planner::new(cfg.clone())?;
        let log = run_episode(scenario, &mut planner, label, seed)?;
        let metrics = episode_metrics(&log);
        Ok(EpisodeResult { log, metrics })
    };
    let results: Vec<Result<EpisodeResult>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CmpcError::Config(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(|&s| one(s)).collect())
    } else {
        seeds.iter().map(|&s| one(s)).collect()
    };
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricsReport> = episodes.iter().map(|e| e.metrics.clone()).collect();
    let aggregate = AggregateReport::from_episodes(label, &scenario.name, cfg.consensus_len, &metrics);
    Ok(BaselineRun { episodes, aggregate })
}

/// Consensus steps for a consensus length in seconds.
pub fn consensus_steps(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub consensus_sec: f64,
    pub report: AggregateReport,
}

/// Consensus-length ablation. A zero length runs the CMPC-0 variant; every
/// other cell is full CMPC with the matching number of consensus steps.
pub fn consensus_sweep(
    scenario: &Scenario,
    base: &PlannerConfig,
    seconds: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(seconds.len());
    for &sec in seconds {
        if !(sec >= 0.0) {
            return Err(CmpcError::InvalidArgument(format!("consensus length {sec} s is negative")));
        }
        let nc = consensus_steps(sec, scenario.dt);
        let (kind, cfg) = if nc == 0 {
            (BaselineKind::Cmpc0, planner_config(BaselineKind::Cmpc0, scenario, base))
        } else {
            let mut b = base.clone();
            b.consensus_len = nc;
            (BaselineKind::Cmpc, planner_config(BaselineKind::Cmpc, scenario, &b))
        };
        let run = run_with_config(kind.name(), &cfg, scenario, seeds, jobs)?;
        rows.push(SweepRow {
            consensus_sec: sec,
            report: run.aggregate,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct TableRow<'a> {
    #[serde(rename = "Method")]
    method: &'a str,
    #[serde(rename = "Collision")]
    collision: &'static str,
    #[serde(rename = "Collisions")]
    collisions: usize,
    #[serde(rename = "Seeds")]
    seeds: usize,
    #[serde(rename = "Max Lat. Vel. Variance (m/s)")]
    variance: f64,
    #[serde(rename = "Max Lat. Vel. Variance min")]
    variance_min: f64,
    #[serde(rename = "Max Lat. Vel. Variance max")]
    variance_max: f64,
    #[serde(rename = "Peak Lat. Acc. (m/s^2)")]
    acc: f64,
    #[serde(rename = "Peak Lat. Acc. min")]
    acc_min: f64,
    #[serde(rename = "Peak Lat. Acc. max")]
    acc_max: f64,
    #[serde(rename = "Avg. Solving Time (ms)")]
    solve_ms: f64,
    #[serde(rename = "Converged Cycles")]
    converged: f64,
}

impl<'a> TableRow<'a> {
    fn new(method: &'a str, r: &AggregateReport) -> Self {
        Self {
            method,
            collision: if r.collisions > 0 { "YES" } else { "NO" },
            collisions: r.collisions,
            seeds: r.seeds,
            variance: r.max_lat_vel_variance.mean,
            variance_min: r.max_lat_vel_variance.min,
            variance_max: r.max_lat_vel_variance.max,
            acc: r.peak_lat_acc.mean,
            acc_min: r.peak_lat_acc.min,
            acc_max: r.peak_lat_acc.max,
            solve_ms: r.avg_solve_ms,
            converged: r.converged_fraction(),
        }
    }
}

fn csv_err(e: csv::Error) -> CmpcError {
    CmpcError::Config(format!("csv: {e}"))
}

/// Comparison table, one row per planner.
pub fn write_results_csv<W: Write>(reports: &[AggregateReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(TableRow::new(&r.planner, r)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CmpcError::Config(format!("csv: {e}")))
}

/// Ablation table, one row per consensus length.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "Consensus Length (s)",
        "N_c",
        "Method",
        "Collision",
        "Collisions",
        "Seeds",
        "Max Lat. Vel. Variance (m/s)",
        "Max Lat. Vel. Variance min",
        "Max Lat. Vel. Variance max",
        "Peak Lat. Acc. (m/s^2)",
        "Peak Lat. Acc. min",
        "Peak Lat. Acc. max",
        "Avg. Solving Time (ms)",
        "Converged Cycles",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let t = TableRow::new(&r.report.planner, &r.report);
        w.write_record([
            r.consensus_sec.to_string(),
            r.report.consensus_len.to_string(),
            t.method.to_string(),
            t.collision.to_string(),
            t.collisions.to_string(),
            t.seeds.to_string(),
            t.variance.to_string(),
            t.variance_min.to_string(),
            t.variance_max.to_string(),
            t.acc.to_string(),
            t.acc_min.to_string(),
            t.acc_max.to_string(),
            t.solve_ms.to_string(),
            t.converged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CmpcError::Config(format!("csv: {e}")))
}

/// Index of the sweep cell with the lowest mean lateral velocity range.
pub fn sweep_minimum(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .min_by(|a, b| a.1.report.max_lat_vel_variance.mean.total_cmp(&b.1.report.max_lat_vel_variance.mean))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn lateral_velocity_examples() {
        let path = [[0.0, 0.0], [10.0, 0.0]];
        let s = |th| RobotState::new(1.0, 0.0, th);
        let v = lateral_velocity(
            &[
                (s(0.0), ControlInput::new(1.8, 0.0)),
                (s(PI / 2.0), ControlInput::new(1.0, 0.0)),
                (s(PI / 6.0), ControlInput::new(1.8, 0.0)),
            ],
            &path,
        );
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!((v[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_metrics() {
        assert_eq!(consistency_metrics(&[0.4; 30], 0.25), (0.0, 0.0));
        assert_eq!(consistency_metrics(&[], 0.25), (0.0, 0.0));
    }

    #[test]
    fn single_tick_step() {
        let mut v = vec![0.0; 10];
        v[5..].fill(1.0);
        let (range, acc) = consistency_metrics(&v, 0.25);
        assert_eq!(acc, 4.0);
        assert_eq!(range, 1.0);
    }

    #[test]
    fn window_spans_one_second() {
        // two samples 1 s apart fall in one window, 1.25 s apart do not
        let mut v = vec![0.0; 12];
        v[2] = 1.0;
        v[6] = -1.0;
        assert_eq!(consistency_metrics(&v, 0.25).0, 2.0);
        v[6] = 0.0;
        v[7] = -1.0;
        assert_eq!(consistency_metrics(&v, 0.25).0, 1.0);
    }

    /// Dense-sampling oracle: a 1 Hz sinusoid sampled finely has a windowed
    /// range of 2A.
    #[test]
    fn sinusoid_range_is_twice_amplitude() {
        for &a in &[0.3, 1.0, 2.5] {
            for &phase in &[0.0, 0.37, 1.1] {
                let dt = 1e-3;
                let v: Vec<f64> = (0..5000).map(|k| a * (2.0 * PI * k as f64 * dt + phase).sin()).collect();
                let (range, _) = consistency_metrics(&v, dt);
                assert!((range - 2.0 * a).abs() < 1e-4 * a, "a {a}: {range}");
            }
        }
        // at the control rate the samples hit the extremes only for the
        // right phase
        let v: Vec<f64> = (0..20).map(|k| (2.0 * PI * k as f64 * 0.25).sin()).collect();
        assert!((consistency_metrics(&v, 0.25).0 - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_ignore_shift_and_padding(
            v in proptest::collection::vec(-2.0f64..2.0, 1..40),
            pad in 0usize..10,
        ) {
            let base = consistency_metrics(&v, 0.25);
            let mut padded = vec![v[0]; pad];
            padded.extend_from_slice(&v);
            padded.extend(std::iter::repeat_n(*v.last().unwrap(), pad));
            let p = consistency_metrics(&padded, 0.25);
            prop_assert_eq!(base.1, p.1);
            // padding can only lengthen short series into a full window
            if v.len() > 4 {
                prop_assert_eq!(base.0, p.0);
            }
            prop_assert!(base.0 >= 0.0 && base.1 >= 0.0);
        }
    }

    #[test]
    fn sweep_cells_map_to_steps() {
        let n: Vec<usize> = SWEEP_SECONDS.iter().map(|&s| consensus_steps(s, 0.25)).collect();
        assert_eq!(n, [0, 4, 8, 20]);
    }

    fn fast_base() -> PlannerConfig {
        let mut b = PlannerConfig::default();
        b.solver.workers = 1;
        b
    }

    #[test]
    fn obstacle_free_runs_are_clean_for_every_kind() {
        let s = Scenario::empty(10.0);
        for kind in BaselineKind::ALL {
            let run = run_baseline(kind, &s, &fast_base(), &[0, 1], 1).unwrap();
            let a = &run.aggregate;
            assert_eq!(a.collisions, 0, "{kind}");
            assert_eq!(a.goals_reached, 2, "{kind}");
            assert!(a.max_lat_vel_variance.max < 1e-6 && a.peak_lat_acc.max < 1e-6, "{kind}: {a:?}");
        }
    }

    #[test]
    fn job_count_does_not_change_metrics() {
        let s = Scenario::empty(8.0);
        let strip = |r: BaselineRun| -> Vec<String> {
            r.episodes
                .into_iter()
                .map(|e| {
                    let mut buf = Vec::new();
                    e.log.without_timing().write_ndjson(&mut buf).unwrap();
                    String::from_utf8(buf).unwrap()
                })
                .collect()
        };
        let a = strip(run_baseline(BaselineKind::Cmpc, &s, &fast_base(), &[0, 1, 2], 1).unwrap());
        let b = strip(run_baseline(BaselineKind::Cmpc, &s, &fast_base(), &[0, 1, 2], 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_routes_zero_to_cmpc_0() {
        let s = Scenario::empty(6.0);
        let rows = consensus_sweep(&s, &fast_base(), &[0.0, 2.0], &[0], 1).unwrap();
        assert_eq!(rows[0].report.planner, "cmpc_0");
        assert_eq!(rows[0].report.consensus_len, 0);
        assert_eq!(rows[1].report.planner, "cmpc");
        assert_eq!(rows[1].report.consensus_len, 8);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("Consensus Length (s),N_c,Method"));
        assert!(consensus_sweep(&s, &fast_base(), &[-1.0], &[0], 1).is_err());
    }

    #[test]
    fn results_csv_has_table_columns() {
        let eps = vec![MetricsReport {
            seed: 0,
            collision: true,
            termination: Termination::Collision,
            max_lat_vel_variance: 1.0,
            peak_lat_acc: 2.0,
            avg_solve_ms: 3.0,
            episode_length_s: 4.0,
            cycles: 16,
            converged_cycles: 15,
            planner_failures: 0,
        }];
        let agg = AggregateReport::from_episodes("cmpc", "x", 8, &eps);
        assert_eq!(agg.avg_solve_ms, 3.0);
        let mut buf = Vec::new();
        write_results_csv(&[agg], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with(
            "Method,Collision,Collisions,Seeds,Max Lat. Vel. Variance (m/s)"
        ));
        assert!(lines.next().unwrap().starts_with("cmpc,YES,1,1,1.0"));
    }
}
