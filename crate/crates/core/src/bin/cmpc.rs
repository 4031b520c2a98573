use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cmpc::eval::{
    consensus_steps, consensus_sweep, run_baseline, sweep_minimum, write_results_csv, write_sweep_csv, AggregateReport,
    MetricsReport, SweepRow, SWEEP_SECONDS,
};
use cmpc::geometry::Hypothesis;
use cmpc::planner::{BaselineKind, PlannerConfig};
use cmpc::sim::Scenario;
use cmpc::verify;

#[derive(Parser)]
#[command(name = "cmpc", version, about = "Occlusion-aware consistent MPC: closed-loop runs, ablations and self-checks")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug); CMPC_LOG takes precedence.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop episodes, one per seed, and write logs and metrics.
    Run(RunArgs),
    /// Consensus-length ablation over a grid of lengths in seconds.
    Sweep(SweepArgs),
    /// Run the built-in property suites and print one line per check.
    Verify,
}

#[derive(Args, Default)]
struct Common {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON file, or one of the built-ins `canonical` and `empty`.
    #[arg(long)]
    scenario: Option<String>,
    /// Seeds: a count `N` (seeds 0..N), a range `A..B` or a list `1,4,7`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Branch hypotheses as obstacle speed bounds in m/s; `x` ignores
    /// occlusion, e.g. `x,0.5,1.0`.
    #[arg(long)]
    branches: Option<String>,
    /// Horizon length in steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Consensus segment length in seconds.
    #[arg(long)]
    consensus_sec: Option<f64>,
    /// Outer iteration cap of the ADMM solver.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Sensor range override, meters.
    #[arg(long)]
    sensor_range: Option<f64>,
    /// Episodes run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Worker threads per planner for branch solves.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Planner kinds, comma separated, or `all`.
    #[arg(long)]
    planner: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Consensus lengths in seconds, comma separated.
    #[arg(long)]
    axis: Option<String>,
}

/// Run configuration file. Every field is optional.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: Option<String>,
    planner: Option<String>,
    seeds: Option<String>,
    out: Option<PathBuf>,
    branches: Option<String>,
    horizon: Option<usize>,
    consensus_sec: Option<f64>,
    max_iters: Option<usize>,
    sensor_range: Option<f64>,
    jobs: Option<usize>,
    workers: Option<usize>,
    axis: Option<String>,
    eps_dual: Option<f64>,
    xi_pri: Option<f64>,
    xi_dual: Option<f64>,
}

enum Failure {
    Config(String),
    Planner(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Planner(_) => 2,
        }
    }
}

impl From<cmpc::CmpcError> for Failure {
    fn from(e: cmpc::CmpcError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn config_err(m: impl Into<String>) -> Failure {
    Failure::Config(m.into())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || config_err(format!("cannot parse seeds {s:?}"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    if s.contains(',') {
        return s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(config_err("seed count must be positive"));
    }
    Ok((0..n).collect())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| config_err(format!("cannot parse {what} {x:?}"))))
        .collect()
}

fn parse_planners(s: &str) -> Result<Vec<BaselineKind>, Failure> {
    if s.trim() == "all" {
        return Ok(BaselineKind::ALL.to_vec());
    }
    s.split(',').map(|x| x.trim().parse::<BaselineKind>().map_err(Failure::from)).collect()
}

fn load_scenario(s: &str) -> Result<Scenario, Failure> {
    match s {
        "canonical" => Ok(Scenario::canonical()),
        "empty" => Ok(Scenario::empty(28.0)),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(config_err(format!("scenario file {} does not exist", p.display())));
            }
            Ok(Scenario::load(p)?)
        }
    }
}

/// Everything a command needs after merging file and flags.
struct Resolved {
    scenario: Scenario,
    seeds: Vec<u64>,
    out: PathBuf,
    base: PlannerConfig,
    jobs: usize,
}

fn resolve(c: &Common) -> Result<(Resolved, FileConfig), Failure> {
    let file = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("cannot parse config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let scenario_name = c.scenario.clone().or(file.scenario.clone()).unwrap_or_else(|| "canonical".into());
    let mut scenario = load_scenario(&scenario_name)?;
    if let Some(r) = c.sensor_range.or(file.sensor_range) {
        scenario.sensor_range = r;
    }
    scenario.validate()?;
    let seeds = parse_seeds(c.seeds.as_deref().or(file.seeds.as_deref()).unwrap_or("1"))?;
    let out = c.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("cmpc_out"));

    let mut base = PlannerConfig::default();
    if let Some(n) = c.horizon.or(file.horizon) {
        base.horizon = n;
    }
    if let Some(sec) = c.consensus_sec.or(file.consensus_sec) {
        if !(sec >= 0.0) {
            return Err(config_err(format!("consensus length {sec} s must be non-negative")));
        }
        base.consensus_len = consensus_steps(sec, scenario.dt);
    }
    if let Some(b) = c.branches.as_deref().or(file.branches.as_deref()) {
        base.hypotheses = parse_list::<Hypothesis>(b, "branch")?;
    }
    if let Some(m) = c.max_iters.or(file.max_iters) {
        base.solver.max_iters = m;
    }
    if let Some(w) = c.workers.or(file.workers) {
        base.solver.workers = w;
    }
    if let Some(v) = file.eps_dual {
        base.solver.eps_dual = v;
    }
    if let Some(v) = file.xi_pri {
        base.solver.xi_pri = v;
    }
    if let Some(v) = file.xi_dual {
        base.solver.xi_dual = v;
    }
    scenario.configure(&base).validate()?;
    let jobs = c.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(config_err("jobs must be at least 1"));
    }
    Ok((
        Resolved {
            scenario,
            seeds,
            out,
            base,
            jobs,
        },
        file,
    ))
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    aggregate: &'a AggregateReport,
    episodes: &'a [MetricsReport],
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (r, file) = resolve(&args.common)?;
    let planners = parse_planners(args.planner.as_deref().or(file.planner.as_deref()).unwrap_or("cmpc"))?;
    create_out(&r.out)?;
    let mut aggregates = Vec::new();
    let mut failures = 0;
    for kind in planners {
        let run = run_baseline(kind, &r.scenario, &r.base, &r.seeds, r.jobs)?;
        for e in &run.episodes {
            let stem = format!("{}_seed{}", kind.name(), e.log.seed);
            e.log
                .write_ndjson(create(&r.out.join(format!("{stem}.ndjson")))?)
                .map_err(|err| config_err(format!("cannot write log: {err}")))?;
            e.log.write_csv(create(&r.out.join(format!("{stem}.csv")))?)?;
            failures += e.log.planner_failures;
        }
        let metrics: Vec<MetricsReport> = run.episodes.iter().map(|e| e.metrics.clone()).collect();
        write_json(
            &r.out.join(format!("{}_metrics.json", kind.name())),
            &RunSummary {
                aggregate: &run.aggregate,
                episodes: &metrics,
            },
        )?;
        let a = &run.aggregate;
        println!(
            "{:<20} collisions {}/{}  lat.vel.range {:.3}  peak lat.acc {:.3}  solve {:.2} ms  converged {:.1}%",
            a.planner,
            a.collisions,
            a.seeds,
            a.max_lat_vel_variance.mean,
            a.peak_lat_acc.mean,
            a.avg_solve_ms,
            100.0 * a.converged_fraction()
        );
        aggregates.push(run.aggregate);
    }
    write_results_csv(&aggregates, create(&r.out.join("results.csv"))?)?;
    write_json(&r.out.join("results.json"), &aggregates)?;
    if failures > 0 {
        return Err(Failure::Planner(format!("{failures} planning cycles failed and fell back to the safety stop")));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let (r, file) = resolve(&args.common)?;
    let axis = match args.axis.as_deref().or(file.axis.as_deref()) {
        Some(a) => parse_list::<f64>(a, "consensus length")?,
        None => SWEEP_SECONDS.to_vec(),
    };
    for &sec in &axis {
        if consensus_steps(sec.max(0.0), r.scenario.dt) > r.base.horizon {
            return Err(config_err(format!(
                "consensus length {sec} s exceeds the {}-step horizon",
                r.base.horizon
            )));
        }
    }
    create_out(&r.out)?;
    let rows: Vec<SweepRow> = consensus_sweep(&r.scenario, &r.base, &axis, &r.seeds, r.jobs)?;
    for row in &rows {
        let a = &row.report;
        println!(
            "{:>4.1} s  N_c {:>2}  {:<8} collisions {}/{}  lat.vel.range {:.3}  peak lat.acc {:.3}",
            row.consensus_sec,
            a.consensus_len,
            a.planner,
            a.collisions,
            a.seeds,
            a.max_lat_vel_variance.mean,
            a.peak_lat_acc.mean
        );
    }
    if let Some(i) = sweep_minimum(&rows) {
        println!("lowest lateral velocity range at {} s", rows[i].consensus_sec);
    }
    write_sweep_csv(&rows, create(&r.out.join("sweep.csv"))?)?;
    write_json(&r.out.join("sweep.json"), &rows)?;
    let failures: usize = rows.iter().map(|r| r.report.planner_failures).sum();
    if failures > 0 {
        return Err(Failure::Planner(format!("{failures} planning cycles failed and fell back to the safety stop")));
    }
    Ok(())
}

fn cmd_verify() -> Result<(), Failure> {
    let checks = verify::run_all();
    for c in &checks {
        println!(
            "{} {} ({} cases; {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        // reported like a configuration problem: the build is not usable
        return Err(config_err(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CMPC_LOG", default)).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify => cmd_verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Planner(m) => eprintln!("planner failure: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
