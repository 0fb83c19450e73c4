//! Closed-loop episode execution, navigation metrics, benchmark
//! orchestration, CSV emission, and flat-file configuration.
//!
//! An episode drops the robot into a generated (or loaded) obstacle field
//! and runs the controller at the control rate against either a fully known
//! costmap or a sensor-limited local window, logging ground-truth states and
//! applied controls until the goal is reached, the robot hits an obstacle,
//! or the time limit expires. Benchmarks sweep a scheme × seed grid with
//! paired seeds, so every scheme faces the identical sequence of worlds.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::controller::{Controller, ControllerConfig, ControllerError, SamplingMode};
use crate::costs::CostParams;
use crate::dynamics::{angle_diff, step, ControlBounds, ControlInput, RobotState};
use crate::unscented::UtParams;
use crate::world::{
    build_known_costmap, build_local_costmap, generate_forest, is_collision, CostmapParams,
    ForestParams, ObstacleMap, WorldError,
};
use crate::{real, Real};

/// Errors from episode execution, benchmarking, or configuration parsing.
#[derive(Debug)]
pub enum HarnessError {
    /// Invalid configuration text or field value.
    Config(String),
    /// Filesystem failure, with path context.
    Io(String),
    /// Obstacle-map or costmap failure.
    World(WorldError),
    /// Controller construction or optimization failure.
    Controller(ControllerError),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Io(m) => write!(f, "io error: {m}"),
            HarnessError::World(e) => write!(f, "world error: {e}"),
            HarnessError::Controller(e) => write!(f, "controller error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<WorldError> for HarnessError {
    fn from(e: WorldError) -> Self {
        HarnessError::World(e)
    }
}

impl From<ControllerError> for HarnessError {
    fn from(e: ControllerError) -> Self {
        HarnessError::Controller(e)
    }
}

/// How the controller perceives obstacles during an episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WorldMode<T> {
    /// The whole obstacle field is rasterized once up front.
    Known,
    /// A robot-centered costmap is rebuilt every iteration from obstacles
    /// within sensing range; unseen space is treated as free.
    SensorLimited {
        /// Sensing radius in meters.
        range: T,
    },
}

/// Everything needed to run one closed-loop navigation episode.
#[derive(Clone, Debug)]
pub struct EpisodeConfig<T> {
    /// Controller setup; its seed is overridden by the episode seed and its
    /// cost goal is retargeted to the active waypoint each iteration.
    pub controller: ControllerConfig<T>,
    /// Obstacle-field generator knobs (used unless `map_path` is set).
    pub forest: ForestParams<T>,
    /// Explicit obstacle map to load instead of generating a forest.
    pub map_path: Option<PathBuf>,
    /// Known map vs sensor-limited local windows.
    pub world_mode: WorldMode<T>,
    /// Occupancy-grid geometry (cell counts apply to the local window).
    pub costmap: CostmapParams<T>,
    /// Collision radius of the robot footprint [m].
    pub robot_radius: T,
    /// Initial ground-truth pose.
    pub start: RobotState<T>,
    /// Poses to visit in order; the last entry is the mission goal.
    pub waypoints: Vec<RobotState<T>>,
    /// Position tolerance for reaching a waypoint [m].
    pub goal_tol_pos: T,
    /// Heading tolerance for reaching a waypoint [rad].
    pub goal_tol_heading: T,
    /// Wall-clock mission budget in simulated seconds.
    pub time_limit: T,
}

impl<T: Real> EpisodeConfig<T> {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.controller.validate()?;
        if !(self.time_limit > T::zero()) {
            return Err(HarnessError::Config("time_limit must be > 0".into()));
        }
        if !(self.goal_tol_pos > T::zero()) || !(self.goal_tol_heading > T::zero()) {
            return Err(HarnessError::Config("goal tolerances must be > 0".into()));
        }
        if !(self.robot_radius > T::zero()) {
            return Err(HarnessError::Config("robot_radius must be > 0".into()));
        }
        if !(self.costmap.resolution > T::zero()) {
            return Err(HarnessError::Config("costmap resolution must be > 0".into()));
        }
        if self.costmap.inflation_radius < T::zero() {
            return Err(HarnessError::Config("inflation_radius must be >= 0".into()));
        }
        if self.waypoints.is_empty() {
            return Err(HarnessError::Config("at least one waypoint required".into()));
        }
        if !self.start.is_finite() || self.waypoints.iter().any(|w| !w.is_finite()) {
            return Err(HarnessError::Config("poses must be finite".into()));
        }
        match self.world_mode {
            WorldMode::Known => {}
            WorldMode::SensorLimited { range } => {
                if !(range > T::zero()) {
                    return Err(HarnessError::Config("sensor range must be > 0".into()));
                }
                if self.costmap.cells_x == 0 || self.costmap.cells_y == 0 {
                    return Err(HarnessError::Config("local costmap needs cells >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Loads the explicit map if configured, otherwise generates the forest
    /// from the episode seed (so paired seeds share worlds across schemes).
    pub fn make_map(&self, seed: u64) -> Result<ObstacleMap<T>, HarnessError> {
        match &self.map_path {
            Some(p) => Ok(ObstacleMap::load(p)?),
            None => Ok(generate_forest(&self.forest, seed)?),
        }
    }
}

/// Terminal condition of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Reached every waypoint within tolerance inside the time limit.
    Success,
    /// Ground-truth footprint overlapped an obstacle.
    Collision,
    /// Time limit expired (or the optimizer starved) without a collision.
    LocalMinimum,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::LocalMinimum => "local_minimum",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "success" => Ok(Outcome::Success),
            "collision" => Ok(Outcome::Collision),
            "local_minimum" => Ok(Outcome::LocalMinimum),
            other => Err(HarnessError::Config(format!("unknown outcome `{other}`"))),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One closed-loop sample: the ground-truth pose at time `t` and the control
/// applied from it over the following interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogSample<T> {
    pub t: T,
    pub state: RobotState<T>,
    pub control: ControlInput<T>,
}

/// Navigation quality measures for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics<T> {
    /// Route progress toward the goal, percent of planned length, in [0, 100].
    pub t_c: T,
    /// Path length actually traveled [m].
    pub distance: T,
    /// Mean applied linear speed [m/s].
    pub v_av: T,
    /// Mean optimization wall time per iteration [ms]; absent unless the
    /// episode ran in timing mode.
    pub t_exec_ms: Option<T>,
    /// Time-averaged squared second derivative of applied linear speed;
    /// absent for logs shorter than four applied controls.
    pub j_acc: Option<T>,
    /// Same measure for applied angular speed.
    pub zeta_acc: Option<T>,
}

/// Everything recorded from one episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult<T> {
    pub outcome: Outcome,
    pub metrics: Metrics<T>,
    /// Per-iteration samples plus one terminal row holding the final pose
    /// (its control repeats the last applied input).
    pub log: Vec<LogSample<T>>,
    /// Number of control iterations executed.
    pub iterations: u64,
    /// Diagnostic detail for abnormal terminations.
    pub note: Option<String>,
}

fn reached<T: Real>(state: &RobotState<T>, wp: &RobotState<T>, cfg: &EpisodeConfig<T>) -> bool {
    state.position_distance(wp) <= cfg.goal_tol_pos
        && angle_diff(state.theta, wp.theta).abs() <= cfg.goal_tol_heading
}

/// Runs one closed-loop episode. The seed drives both the world generator
/// and the controller's noise streams; `measure_timing` records per-iteration
/// optimization wall time (leave it off for byte-reproducible metrics).
pub fn run_episode<T: Real>(
    cfg: &EpisodeConfig<T>,
    seed: u64,
    measure_timing: bool,
) -> Result<EpisodeResult<T>, HarnessError> {
    cfg.validate()?;
    let map = cfg.make_map(seed)?;
    let mut ctrl_cfg = cfg.controller.clone();
    ctrl_cfg.seed = seed;
    let mut controller = Controller::new(ctrl_cfg)?;
    let dt = cfg.controller.dt;
    let known = match cfg.world_mode {
        WorldMode::Known => Some(build_known_costmap(
            &map,
            cfg.costmap.resolution,
            cfg.costmap.inflation_radius,
        )),
        WorldMode::SensorLimited { .. } => None,
    };

    let mut state = cfg.start;
    let mut wp = 0usize;
    let mut log: Vec<LogSample<T>> = Vec::new();
    let mut exec_ms: Vec<f64> = Vec::new();
    let mut note = None;
    let mut last_applied = ControlInput::zero();
    let mut k: u64 = 0;

    let outcome = loop {
        while wp < cfg.waypoints.len() && reached(&state, &cfg.waypoints[wp], cfg) {
            wp += 1;
        }
        if wp == cfg.waypoints.len() {
            break Outcome::Success;
        }
        let t = dt * real::<T>(k as f64);
        if t >= cfg.time_limit {
            break Outcome::LocalMinimum;
        }
        controller.set_goal(cfg.waypoints[wp]);
        let stepped = match cfg.world_mode {
            WorldMode::Known => {
                controller.control_step(&state, known.as_ref().expect("known map built"))
            }
            WorldMode::SensorLimited { range } => {
                let local = build_local_costmap(&map, &state, range, &cfg.costmap);
                controller.control_step(&state, &local)
            }
        };
        let out = match stepped {
            Ok(o) => o,
            Err(ControllerError::NoFeasibleRollout) => {
                note = Some(format!("every rollout rejected at iteration {k}; stopping early"));
                break Outcome::LocalMinimum;
            }
            Err(e) => return Err(HarnessError::Controller(e)),
        };
        if measure_timing {
            exec_ms.push(out.diag.t_exec_ms);
        }
        log.push(LogSample { t, state, control: out.applied });
        last_applied = out.applied;
        state = step(&state, &out.applied, dt);
        k += 1;
        if is_collision(&map, &state, cfg.robot_radius) {
            break Outcome::Collision;
        }
    };

    let t_end = dt * real::<T>(k as f64);
    log.push(LogSample { t: t_end, state, control: last_applied });
    let metrics = compute_metrics(&log, cfg, &exec_ms);
    Ok(EpisodeResult { outcome, metrics, log, iterations: k, note })
}

/// Planned route length: start through every waypoint in order.
fn route_length<T: Real>(start: &RobotState<T>, waypoints: &[RobotState<T>]) -> T {
    let mut total = T::zero();
    let mut prev = *start;
    for w in waypoints {
        total += prev.position_distance(w);
        prev = *w;
    }
    total
}

/// Shortest remaining route from `state` to the goal: rejoin the waypoint
/// chain at whichever entry minimizes (distance to it + legs after it).
fn route_remaining<T: Real>(state: &RobotState<T>, waypoints: &[RobotState<T>]) -> T {
    let mut tail = T::zero();
    let mut best: Option<T> = None;
    for i in (0..waypoints.len()).rev() {
        let via = state.position_distance(&waypoints[i]) + tail;
        best = Some(match best {
            Some(b) if b <= via => b,
            _ => via,
        });
        if i > 0 {
            tail += waypoints[i - 1].position_distance(&waypoints[i]);
        }
    }
    best.unwrap_or_else(T::zero)
}

/// Time-averaged squared second derivative of a uniformly sampled series:
/// second-order central differences inside, one-sided second-order stencils
/// at the ends, trapezoidal integration divided by the span. Needs at least
/// four samples.
fn mean_squared_second_derivative<T: Real>(xs: &[T], dt: T) -> Option<T> {
    let n = xs.len();
    if n < 4 {
        return None;
    }
    let dt2 = dt * dt;
    let two = real::<T>(2.0);
    let three = real::<T>(3.0);
    let half = real::<T>(0.5);
    // All stencils are evaluated on first differences so that a constant
    // series yields exactly zero (no rounding from scaled absolute values).
    let mut dd = vec![T::zero(); n];
    {
        let d1 = xs[1] - xs[0];
        let d2 = xs[2] - xs[1];
        let d3 = xs[3] - xs[2];
        dd[0] = (three * d2 - two * d1 - d3) / dt2;
    }
    for i in 1..n - 1 {
        dd[i] = ((xs[i + 1] - xs[i]) - (xs[i] - xs[i - 1])) / dt2;
    }
    {
        let e1 = xs[n - 2] - xs[n - 1];
        let e2 = xs[n - 3] - xs[n - 2];
        let e3 = xs[n - 4] - xs[n - 3];
        dd[n - 1] = (three * e2 - two * e1 - e3) / dt2;
    }
    let mut integral = T::zero();
    for i in 0..n - 1 {
        integral += (dd[i] * dd[i] + dd[i + 1] * dd[i + 1]) * half * dt;
    }
    let span = dt * real::<T>((n - 1) as f64);
    Some(integral / span)
}

/// Derives the metrics record from an episode log. The log's final row is the
/// terminal pose; rows before it carry the applied controls. `exec_ms` holds
/// per-iteration optimization times when timing was measured (else empty).
pub fn compute_metrics<T: Real>(
    log: &[LogSample<T>],
    cfg: &EpisodeConfig<T>,
    exec_ms: &[f64],
) -> Metrics<T> {
    let hundred = real::<T>(100.0);
    let planned = route_length(&cfg.start, &cfg.waypoints);
    let final_state = log.last().map(|s| s.state).unwrap_or(cfg.start);
    let t_c = if planned <= real::<T>(1e-12) {
        hundred
    } else {
        let remaining = route_remaining(&final_state, &cfg.waypoints);
        let pct = (planned - remaining) / planned * hundred;
        if pct < T::zero() {
            T::zero()
        } else if pct > hundred {
            hundred
        } else {
            pct
        }
    };

    let mut distance = T::zero();
    for pair in log.windows(2) {
        distance += pair[0].state.position_distance(&pair[1].state);
    }

    let applied = &log[..log.len().saturating_sub(1)];
    let v_av = if applied.is_empty() {
        T::zero()
    } else {
        applied.iter().map(|s| s.control.v).sum::<T>() / real::<T>(applied.len() as f64)
    };

    let dt = cfg.controller.dt;
    let vs: Vec<T> = applied.iter().map(|s| s.control.v).collect();
    let ws: Vec<T> = applied.iter().map(|s| s.control.omega).collect();
    let j_acc = mean_squared_second_derivative(&vs, dt);
    let zeta_acc = mean_squared_second_derivative(&ws, dt);

    let t_exec_ms = if exec_ms.is_empty() {
        None
    } else {
        Some(real::<T>(exec_ms.iter().sum::<f64>() / exec_ms.len() as f64))
    };

    Metrics { t_c, distance, v_av, t_exec_ms, j_acc, zeta_acc }
}

/// A benchmark: one episode template swept over schemes × seeds.
#[derive(Clone, Debug)]
pub struct BenchmarkConfig<T> {
    pub episode: EpisodeConfig<T>,
    /// Sampling schemes to compare; each runs the full seed set.
    pub schemes: Vec<SamplingMode>,
    /// First episode seed; trials use base_seed, base_seed+1, …
    pub base_seed: u64,
    /// Episodes per scheme.
    pub trials: usize,
    /// Run episodes sequentially and record per-iteration optimization time.
    /// Off by default: episodes then run in parallel and the timing column
    /// stays empty, keeping emitted CSV byte-reproducible.
    pub measure_timing: bool,
}

impl<T: Real> BenchmarkConfig<T> {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.episode.validate()?;
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be >= 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(HarnessError::Config("at least one scheme required".into()));
        }
        for (i, a) in self.schemes.iter().enumerate() {
            if self.schemes[..i].contains(a) {
                return Err(HarnessError::Config(format!("duplicate scheme `{a}`")));
            }
        }
        Ok(())
    }
}

/// One row of `episodes.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow<T> {
    pub scheme: SamplingMode,
    pub seed: u64,
    pub outcome: Outcome,
    pub t_c: T,
    pub distance: T,
    pub v_av: T,
    pub t_exec_ms: Option<T>,
    pub j_acc: Option<T>,
    pub zeta_acc: Option<T>,
}

/// Per-scheme aggregates. Success rate and completion cover every episode;
/// the (mean, sd) pairs and jerk measures cover successful episodes only.
#[derive(Clone, Debug)]
pub struct SchemeSummary<T> {
    pub scheme: SamplingMode,
    pub episodes: usize,
    /// Success rate in percent.
    pub s_r: T,
    /// Mean route completion in percent, failures included.
    pub t_c: T,
    /// Collision count.
    pub n_c: usize,
    /// Timeout/starvation count.
    pub r_lm: usize,
    pub d_av: Option<(T, T)>,
    pub v_av: Option<(T, T)>,
    pub t_exec_ms: Option<(T, T)>,
    pub j_acc: Option<T>,
    pub zeta_acc: Option<T>,
}

/// Everything a benchmark produces, episode order matching `rows`.
#[derive(Clone, Debug)]
pub struct BenchmarkOutput<T> {
    /// Scheme-major, then seed-ascending.
    pub rows: Vec<EpisodeRow<T>>,
    pub summaries: Vec<SchemeSummary<T>>,
    pub episodes: Vec<EpisodeResult<T>>,
}

fn mean_sd<T: Real>(xs: &[T]) -> Option<(T, T)> {
    if xs.is_empty() {
        return None;
    }
    let n = real::<T>(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    if xs.len() < 2 {
        return Some((mean, T::zero()));
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>()
        / real::<T>((xs.len() - 1) as f64);
    Some((mean, var.sqrt()))
}

fn summarize<T: Real>(scheme: SamplingMode, rows: &[EpisodeRow<T>]) -> SchemeSummary<T> {
    let mine: Vec<&EpisodeRow<T>> = rows.iter().filter(|r| r.scheme == scheme).collect();
    let n = mine.len();
    let wins: Vec<&&EpisodeRow<T>> =
        mine.iter().filter(|r| r.outcome == Outcome::Success).collect();
    let n_c = mine.iter().filter(|r| r.outcome == Outcome::Collision).count();
    let r_lm = mine.iter().filter(|r| r.outcome == Outcome::LocalMinimum).count();
    let deno = if n == 0 { T::one() } else { real::<T>(n as f64) };
    let s_r = real::<T>(wins.len() as f64) / deno * real::<T>(100.0);
    let t_c = mine.iter().map(|r| r.t_c).sum::<T>() / deno;
    let collect = |f: &dyn Fn(&EpisodeRow<T>) -> Option<T>| -> Vec<T> {
        wins.iter().filter_map(|r| f(r)).collect()
    };
    let d_av = mean_sd(&collect(&|r| Some(r.distance)));
    let v_av = mean_sd(&collect(&|r| Some(r.v_av)));
    let t_exec_ms = mean_sd(&collect(&|r| r.t_exec_ms));
    let j_acc = mean_sd(&collect(&|r| r.j_acc)).map(|(m, _)| m);
    let zeta_acc = mean_sd(&collect(&|r| r.zeta_acc)).map(|(m, _)| m);
    SchemeSummary { scheme, episodes: n, s_r, t_c, n_c, r_lm, d_av, v_av, t_exec_ms, j_acc, zeta_acc }
}

/// Runs the scheme × seed grid. Seeds are paired: episode `i` of every
/// scheme uses seed `base_seed + i` and thus an identical world. Episodes run
/// in parallel unless timing is being measured (then sequentially, so wall
/// times are undisturbed).
pub fn run_benchmark<T: Real>(cfg: &BenchmarkConfig<T>) -> Result<BenchmarkOutput<T>, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(SamplingMode, u64)> = cfg
        .schemes
        .iter()
        .flat_map(|&s| (0..cfg.trials).map(move |i| (s, i as u64)))
        .map(|(s, i)| (s, cfg.base_seed.wrapping_add(i)))
        .collect();
    let run_one = |job: &(SamplingMode, u64)| -> Result<EpisodeResult<T>, HarnessError> {
        let mut ep = cfg.episode.clone();
        ep.controller.mode = job.0;
        run_episode(&ep, job.1, cfg.measure_timing)
    };
    let episodes: Vec<EpisodeResult<T>> = if cfg.measure_timing {
        jobs.iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        jobs.par_iter().map(run_one).collect::<Result<_, _>>()?
    };
    let rows: Vec<EpisodeRow<T>> = jobs
        .iter()
        .zip(&episodes)
        .map(|(&(scheme, seed), ep)| EpisodeRow {
            scheme,
            seed,
            outcome: ep.outcome,
            t_c: ep.metrics.t_c,
            distance: ep.metrics.distance,
            v_av: ep.metrics.v_av,
            t_exec_ms: ep.metrics.t_exec_ms,
            j_acc: ep.metrics.j_acc,
            zeta_acc: ep.metrics.zeta_acc,
        })
        .collect();
    let summaries = cfg.schemes.iter().map(|&s| summarize(s, &rows)).collect();
    Ok(BenchmarkOutput { rows, summaries, episodes })
}

const EPISODE_CSV_FIELDS: [&str; 9] =
    ["scheme", "seed", "outcome", "T_c", "d", "v_av", "t_exec_ms", "J_acc", "zeta_acc"];

const SUMMARY_CSV_FIELDS: [&str; 14] = [
    "scheme", "episodes", "S_R", "T_c", "N_c", "R_lm", "d_av", "d_sd", "v_av", "v_sd",
    "t_exec_ms", "t_exec_sd", "J_acc", "zeta_acc",
];

const TRAJECTORY_CSV_FIELDS: [&str; 6] = ["t", "x", "y", "theta", "v", "omega"];

fn fmt_scalar<T: Real>(x: T) -> String {
    format!("{x}")
}

fn fmt_opt<T: Real>(x: Option<T>) -> String {
    x.map(fmt_scalar).unwrap_or_default()
}

fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Renders episode rows as CSV text (the exact bytes `bench` writes).
pub fn episode_csv<T: Real>(rows: &[EpisodeRow<T>]) -> String {
    csv_string(
        &EPISODE_CSV_FIELDS,
        rows.iter()
            .map(|r| {
                vec![
                    r.scheme.label().to_string(),
                    r.seed.to_string(),
                    r.outcome.label().to_string(),
                    fmt_scalar(r.t_c),
                    fmt_scalar(r.distance),
                    fmt_scalar(r.v_av),
                    fmt_opt(r.t_exec_ms),
                    fmt_opt(r.j_acc),
                    fmt_opt(r.zeta_acc),
                ]
            })
            .collect(),
    )
}

/// Parses `episodes.csv` text back into rows; exact inverse of
/// [`episode_csv`] for values produced by it.
pub fn parse_episode_csv<T: Real>(text: &str) -> Result<Vec<EpisodeRow<T>>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    {
        let hdr = rdr.headers().map_err(|e| HarnessError::Config(format!("csv header: {e}")))?;
        if hdr.iter().ne(EPISODE_CSV_FIELDS) {
            return Err(HarnessError::Config(format!("unexpected csv header `{hdr:?}`")));
        }
    }
    let parse_t = |s: &str, name: &str| -> Result<T, HarnessError> {
        s.parse::<f64>()
            .map(real::<T>)
            .map_err(|e| HarnessError::Config(format!("field {name}: bad number `{s}`: {e}")))
    };
    let parse_opt = |s: &str, name: &str| -> Result<Option<T>, HarnessError> {
        if s.is_empty() { Ok(None) } else { parse_t(s, name).map(Some) }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Config(format!("csv record: {e}")))?;
        if rec.len() != EPISODE_CSV_FIELDS.len() {
            return Err(HarnessError::Config(format!("csv record has {} fields", rec.len())));
        }
        rows.push(EpisodeRow {
            scheme: parse_mode(&rec[0])?,
            seed: rec[1]
                .parse::<u64>()
                .map_err(|e| HarnessError::Config(format!("field seed: `{}`: {e}", &rec[1])))?,
            outcome: Outcome::parse(&rec[2])?,
            t_c: parse_t(&rec[3], "T_c")?,
            distance: parse_t(&rec[4], "d")?,
            v_av: parse_t(&rec[5], "v_av")?,
            t_exec_ms: parse_opt(&rec[6], "t_exec_ms")?,
            j_acc: parse_opt(&rec[7], "J_acc")?,
            zeta_acc: parse_opt(&rec[8], "zeta_acc")?,
        });
    }
    Ok(rows)
}

pub fn write_episode_csv<T: Real>(path: &Path, rows: &[EpisodeRow<T>]) -> Result<(), HarnessError> {
    fs::write(path, episode_csv(rows)).map_err(|e| io_err(path, e))
}

pub fn read_episode_csv<T: Real>(path: &Path) -> Result<Vec<EpisodeRow<T>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_episode_csv(&text)
}

/// Renders per-scheme aggregates as CSV text.
pub fn summary_csv<T: Real>(summaries: &[SchemeSummary<T>]) -> String {
    let pair = |p: Option<(T, T)>| -> (String, String) {
        match p {
            Some((m, s)) => (fmt_scalar(m), fmt_scalar(s)),
            None => (String::new(), String::new()),
        }
    };
    csv_string(
        &SUMMARY_CSV_FIELDS,
        summaries
            .iter()
            .map(|s| {
                let (d_m, d_s) = pair(s.d_av);
                let (v_m, v_s) = pair(s.v_av);
                let (e_m, e_s) = pair(s.t_exec_ms);
                vec![
                    s.scheme.label().to_string(),
                    s.episodes.to_string(),
                    fmt_scalar(s.s_r),
                    fmt_scalar(s.t_c),
                    s.n_c.to_string(),
                    s.r_lm.to_string(),
                    d_m,
                    d_s,
                    v_m,
                    v_s,
                    e_m,
                    e_s,
                    fmt_opt(s.j_acc),
                    fmt_opt(s.zeta_acc),
                ]
            })
            .collect(),
    )
}

pub fn write_summary_csv<T: Real>(
    path: &Path,
    summaries: &[SchemeSummary<T>],
) -> Result<(), HarnessError> {
    fs::write(path, summary_csv(summaries)).map_err(|e| io_err(path, e))
}

/// Renders one episode's trajectory log as CSV text.
pub fn trajectory_csv<T: Real>(log: &[LogSample<T>]) -> String {
    csv_string(
        &TRAJECTORY_CSV_FIELDS,
        log.iter()
            .map(|s| {
                vec![
                    fmt_scalar(s.t),
                    fmt_scalar(s.state.x),
                    fmt_scalar(s.state.y),
                    fmt_scalar(s.state.theta),
                    fmt_scalar(s.control.v),
                    fmt_scalar(s.control.omega),
                ]
            })
            .collect(),
    )
}

pub fn write_trajectory_csv<T: Real>(
    path: &Path,
    log: &[LogSample<T>],
) -> Result<(), HarnessError> {
    fs::write(path, trajectory_csv(log)).map_err(|e| io_err(path, e))
}

/// Parses a scheme label (`mppi`, `umppi-sm0`, `umppi-sm1`).
pub fn parse_mode(s: &str) -> Result<SamplingMode, HarnessError> {
    match s {
        "mppi" => Ok(SamplingMode::Mppi),
        "umppi-sm0" => Ok(SamplingMode::UmppiSm0),
        "umppi-sm1" => Ok(SamplingMode::UmppiSm1),
        other => Err(HarnessError::Config(format!("unknown scheme `{other}`"))),
    }
}

/// Baseline benchmark: the sparse desk-scale preset with the standard
/// controller parameterization (30 Hz, 180-step horizon, 994 rollouts,
/// exploration noise diag(0.023, 0.028), temperature 0.572, risk-seeking
/// unscented evaluation, 61/5 smoothing).
pub fn default_config<T: Real>() -> BenchmarkConfig<T> {
    let lambda = real::<T>(0.572);
    let sigma_u = Vector2::new(real::<T>(0.023), real::<T>(0.028));
    // Control-effort weight tied to the exploration scale: R = λ·Σ_u^{-1/2}.
    let r = Matrix2::new(
        lambda / sigma_u.x.sqrt(),
        T::zero(),
        T::zero(),
        lambda / sigma_u.y.sqrt(),
    );
    let goal = RobotState::new(real::<T>(25.0), real::<T>(25.0), T::zero());
    let costs = CostParams {
        q_diag: Vector3::new(real::<T>(2.5), real::<T>(2.5), real::<T>(2.0)),
        gamma: T::one(),
        w_crash: real::<T>(1000.0),
        r,
        nu: real::<T>(1200.0),
        lambda,
        goal,
    };
    let controller = ControllerConfig {
        horizon: 180,
        rollouts: 994,
        mode: SamplingMode::UmppiSm1,
        sigma_u,
        sigma_0: Matrix3::identity() * real::<T>(0.001),
        dt: real::<T>(1.0 / 30.0),
        ut: UtParams::defaults(3),
        costs,
        bounds: ControlBounds::new(real::<T>(-0.5), real::<T>(2.0), real::<T>(-3.0), real::<T>(3.0)),
        sg_window: 61,
        sg_order: 5,
        seed: 1,
    };
    let episode = EpisodeConfig {
        controller,
        forest: ForestParams::new(real::<T>(25.0), real::<T>(25.0), real::<T>(3.0), real::<T>(0.15)),
        map_path: None,
        world_mode: WorldMode::Known,
        costmap: CostmapParams::new(real::<T>(0.05), 240, 240, real::<T>(0.417)),
        robot_radius: real::<T>(0.267),
        start: RobotState::new(T::zero(), T::zero(), T::zero()),
        waypoints: vec![goal],
        goal_tol_pos: real::<T>(0.5),
        goal_tol_heading: real::<T>(0.35),
        time_limit: real::<T>(70.0),
    };
    BenchmarkConfig {
        episode,
        schemes: vec![SamplingMode::Mppi, SamplingMode::UmppiSm1],
        base_seed: 1,
        trials: 10,
        measure_timing: false,
    }
}

/// Applies a named scenario preset on top of the current configuration.
///
/// Desk presets keep runtimes laptop-friendly; the `scenario*` presets are
/// the full-size fields with their faster speed limits and larger sample
/// counts.
pub fn apply_preset<T: Real>(cfg: &mut BenchmarkConfig<T>, name: &str) -> Result<(), HarnessError> {
    // (extent, spacing, v_max, rollouts, horizon)
    let (extent, d_min, v_max, rollouts, horizon) = match name {
        "sparse-desk" => (25.0, 3.0, 2.0, 994, 180),
        "dense-desk" => (25.0, 1.5, 2.0, 994, 180),
        "scenario1" => (50.0, 1.5, 2.0, 2499, 240),
        "scenario2" => (50.0, 2.0, 3.0, 2499, 240),
        "scenario3" => (50.0, 3.0, 4.0, 2499, 240),
        other => return Err(HarnessError::Config(format!("unknown preset `{other}`"))),
    };
    let ep = &mut cfg.episode;
    let obstacle_radius = ep.forest.obstacle_radius;
    ep.forest =
        ForestParams::new(real::<T>(extent), real::<T>(extent), real::<T>(d_min), obstacle_radius);
    ep.map_path = None;
    let goal = RobotState::new(real::<T>(extent), real::<T>(extent), T::zero());
    ep.start = RobotState::new(T::zero(), T::zero(), T::zero());
    ep.waypoints = vec![goal];
    ep.controller.costs.goal = goal;
    ep.controller.bounds.v_max = real::<T>(v_max);
    ep.controller.rollouts = rollouts;
    ep.controller.horizon = horizon;
    Ok(())
}

fn parse_scalar<T: Real>(v: &str) -> Result<T, String> {
    v.parse::<f64>().map(real::<T>).map_err(|e| format!("bad number `{v}`: {e}"))
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse::<usize>().map_err(|e| format!("bad integer `{v}`: {e}"))
}

fn parse_u64(v: &str) -> Result<u64, String> {
    v.parse::<u64>().map_err(|e| format!("bad integer `{v}`: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("bad bool `{other}` (use true/false)")),
    }
}

fn parse_pose<T: Real>(v: &str) -> Result<RobotState<T>, String> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(format!("pose `{v}` must be three numbers `x y theta`"));
    }
    Ok(RobotState::new(
        parse_scalar(parts[0])?,
        parse_scalar(parts[1])?,
        parse_scalar(parts[2])?,
    ))
}

fn apply_key<T: Real>(cfg: &mut BenchmarkConfig<T>, key: &str, value: &str) -> Result<(), String> {
    let ep = &mut cfg.episode;
    let ctrl = &mut ep.controller;
    match key {
        "scenario.preset" => apply_preset(cfg, value).map_err(|e| e.to_string())?,

        "controller.horizon" => ctrl.horizon = parse_usize(value)?,
        "controller.rollouts" => ctrl.rollouts = parse_usize(value)?,
        "controller.mode" => ctrl.mode = parse_mode(value).map_err(|e| e.to_string())?,
        "controller.sigma_u_v" => ctrl.sigma_u.x = parse_scalar(value)?,
        "controller.sigma_u_omega" => ctrl.sigma_u.y = parse_scalar(value)?,
        "controller.sigma_0" => ctrl.sigma_0 = Matrix3::identity() * parse_scalar::<T>(value)?,
        "controller.dt" => ctrl.dt = parse_scalar(value)?,
        "controller.sg_window" => ctrl.sg_window = parse_usize(value)?,
        "controller.sg_order" => ctrl.sg_order = parse_usize(value)?,
        "controller.seed" => ctrl.seed = parse_u64(value)?,

        "ut.alpha" => ctrl.ut.alpha = parse_scalar(value)?,
        "ut.k_sigma" => ctrl.ut.k_sigma = parse_scalar(value)?,
        "ut.beta" => ctrl.ut.beta = parse_scalar(value)?,

        "costs.q_x" => ctrl.costs.q_diag.x = parse_scalar(value)?,
        "costs.q_y" => ctrl.costs.q_diag.y = parse_scalar(value)?,
        "costs.q_theta" => ctrl.costs.q_diag.z = parse_scalar(value)?,
        "costs.gamma" => ctrl.costs.gamma = parse_scalar(value)?,
        "costs.w_crash" => ctrl.costs.w_crash = parse_scalar(value)?,
        "costs.nu" => ctrl.costs.nu = parse_scalar(value)?,
        "costs.lambda" => ctrl.costs.lambda = parse_scalar(value)?,
        "costs.r_v" => ctrl.costs.r[(0, 0)] = parse_scalar(value)?,
        "costs.r_omega" => ctrl.costs.r[(1, 1)] = parse_scalar(value)?,

        "bounds.v_min" => ctrl.bounds.v_min = parse_scalar(value)?,
        "bounds.v_max" => ctrl.bounds.v_max = parse_scalar(value)?,
        "bounds.omega_min" => ctrl.bounds.omega_min = parse_scalar(value)?,
        "bounds.omega_max" => ctrl.bounds.omega_max = parse_scalar(value)?,

        "world.width" => {
            ep.forest.width = parse_scalar(value)?;
            refresh_keep_outs(&mut ep.forest);
        }
        "world.height" => {
            ep.forest.height = parse_scalar(value)?;
            refresh_keep_outs(&mut ep.forest);
        }
        "world.d_min" => ep.forest.d_min = parse_scalar(value)?,
        "world.obstacle_radius" => ep.forest.obstacle_radius = parse_scalar(value)?,
        "world.keep_out_radius" => ep.forest.keep_out_radius = parse_scalar(value)?,
        "world.map_path" => {
            ep.map_path = if value.is_empty() || value == "none" {
                None
            } else {
                Some(PathBuf::from(value))
            }
        }
        "world.mode" => {
            ep.world_mode = match value {
                "known" => WorldMode::Known,
                "sensor-limited" => WorldMode::SensorLimited { range: real::<T>(7.0) },
                other => return Err(format!("unknown world mode `{other}`")),
            }
        }
        "world.sensor_range" => match &mut ep.world_mode {
            WorldMode::SensorLimited { range } => *range = parse_scalar(value)?,
            WorldMode::Known => {
                return Err("set `world.mode = sensor-limited` before world.sensor_range".into())
            }
        },

        "costmap.resolution" => ep.costmap.resolution = parse_scalar(value)?,
        "costmap.cells_x" => ep.costmap.cells_x = parse_usize(value)?,
        "costmap.cells_y" => ep.costmap.cells_y = parse_usize(value)?,
        "costmap.inflation_radius" => ep.costmap.inflation_radius = parse_scalar(value)?,

        "episode.robot_radius" => ep.robot_radius = parse_scalar(value)?,
        "episode.start" => ep.start = parse_pose(value)?,
        "episode.goal" => {
            let goal = parse_pose(value)?;
            ep.waypoints = vec![goal];
            ctrl.costs.goal = goal;
        }
        "episode.waypoints" => {
            let wps: Result<Vec<RobotState<T>>, String> =
                value.split(';').map(|p| parse_pose(p.trim())).collect();
            let wps = wps?;
            if wps.is_empty() {
                return Err("waypoint list is empty".into());
            }
            ctrl.costs.goal = *wps.last().expect("non-empty");
            ep.waypoints = wps;
        }
        "episode.goal_tol_pos" => ep.goal_tol_pos = parse_scalar(value)?,
        "episode.goal_tol_heading" => ep.goal_tol_heading = parse_scalar(value)?,
        "episode.time_limit" => ep.time_limit = parse_scalar(value)?,

        "bench.schemes" => {
            let schemes: Result<Vec<SamplingMode>, HarnessError> =
                value.split_whitespace().map(parse_mode).collect();
            let schemes = schemes.map_err(|e| e.to_string())?;
            if schemes.is_empty() {
                return Err("scheme list is empty".into());
            }
            cfg.schemes = schemes;
        }
        "bench.base_seed" => cfg.base_seed = parse_u64(value)?,
        "bench.trials" => cfg.trials = parse_usize(value)?,
        "bench.timing" => cfg.measure_timing = parse_bool(value)?,

        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Keep-outs track the mission corners when the extent changes.
fn refresh_keep_outs<T: Real>(forest: &mut ForestParams<T>) {
    forest.keep_out = vec![(T::zero(), T::zero()), (forest.width, forest.height)];
}

/// Applies flat `section.key = value` configuration text to an existing
/// configuration. Blank lines and lines starting with `#` are skipped; keys
/// apply in order (so put `scenario.preset` first when combining it with
/// overrides); unknown keys are an error. No final validation is performed,
/// so layered sources can be combined before checking.
pub fn apply_config_text<T: Real>(
    cfg: &mut BenchmarkConfig<T>,
    text: &str,
) -> Result<(), HarnessError> {
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", idx + 1)))?;
        apply_key(cfg, key.trim(), value.trim())
            .map_err(|e| HarnessError::Config(format!("line {}: {e}", idx + 1)))?;
    }
    Ok(())
}

/// Parses configuration text on top of [`default_config`] and validates the
/// result.
pub fn parse_config<T: Real>(text: &str) -> Result<BenchmarkConfig<T>, HarnessError> {
    let mut cfg = default_config::<T>();
    apply_config_text(&mut cfg, text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a configuration file.
pub fn load_config<T: Real>(path: &Path) -> Result<BenchmarkConfig<T>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_config(&text)
}
