//! Command-line front end: single navigation episodes, benchmark suites,
//! a Monte-Carlo check of the risk-sensitive cost, and obstacle-field
//! generation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::{Matrix1, Vector1};

use umppi::costs::{mc_rs_oracle, risk_sensitive_cost};
use umppi::harness::{
    apply_config_text, apply_preset, default_config, parse_mode, run_benchmark, run_episode,
    write_episode_csv, write_summary_csv, write_trajectory_csv, BenchmarkConfig, EpisodeResult,
};
use umppi::world::{build_known_costmap, generate_forest};

#[derive(Parser)]
#[command(
    name = "umppi",
    version,
    about = "Sampling-based stochastic MPC for cluttered 2D navigation: \
             path-integral control plus an unscented, risk-sensitive variant"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one closed-loop episode and write its trajectory log.
    Run {
        /// Flat key/value configuration file (applied over the defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario preset (sparse-desk, dense-desk, scenario1/2/3),
        /// applied before the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Episode seed (drives both the forest and the controller noise).
        #[arg(long)]
        seed: Option<u64>,
        /// Sampling scheme: mppi, umppi-sm0, or umppi-sm1.
        #[arg(long)]
        scheme: Option<String>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the scheme × seed benchmark grid and write CSV results.
    Bench {
        /// Flat key/value configuration file (applied over the defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario preset (sparse-desk, dense-desk, scenario1/2/3), applied before the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Override the first episode seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict the grid to a single scheme.
        #[arg(long)]
        scheme: Option<String>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run episodes sequentially and record per-iteration optimization
        /// time (the t_exec_ms column stays empty without this).
        #[arg(long)]
        timing: bool,
    },
    /// Compare the closed-form risk-sensitive cost against a Monte-Carlo
    /// estimate over a scalar parameter grid.
    Oracle {
        /// Monte-Carlo samples per grid point.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate an obstacle field and save it as text plus a PGM preview.
    GenWorld {
        /// Flat key/value configuration file (applied over the defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario preset (sparse-desk, dense-desk, scenario1/2/3), applied before the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Forest seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Builds the effective configuration: defaults, then preset, then config
/// file, then command-line seed/scheme overrides.
fn build_config(
    preset: &Option<String>,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    scheme: &Option<String>,
) -> Result<BenchmarkConfig<f64>> {
    let mut cfg = default_config::<f64>();
    if let Some(name) = preset {
        apply_preset(&mut cfg, name)?;
    }
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        apply_config_text(&mut cfg, &text)
            .with_context(|| format!("parsing config {}", path.display()))?;
    }
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(s) = scheme {
        let mode = parse_mode(s)?;
        cfg.episode.controller.mode = mode;
        cfg.schemes = vec![mode];
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_episode(res: &EpisodeResult<f64>, dt: f64) {
    let m = &res.metrics;
    println!("outcome: {}", res.outcome);
    println!("iterations: {} ({:.2} s simulated)", res.iterations, res.iterations as f64 * dt);
    println!("T_c: {:.2}%  d: {:.2} m  v_av: {:.3} m/s", m.t_c, m.distance, m.v_av);
    println!(
        "t_exec: {} ms/iter  J_acc: {}  zeta_acc: {}",
        fmt_opt(m.t_exec_ms),
        fmt_opt(m.j_acc),
        fmt_opt(m.zeta_acc)
    );
    if let Some(note) = &res.note {
        println!("note: {note}");
    }
}

fn cmd_run(cfg: BenchmarkConfig<f64>, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ep = cfg.episode;
    let seed = cfg.base_seed;
    let res = run_episode(&ep, seed, true)?;
    print_episode(&res, ep.controller.dt);
    let path = out.join(format!("ep_{}_{}.csv", ep.controller.mode.label(), seed));
    write_trajectory_csv(&path, &res.log)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bench(cfg: BenchmarkConfig<f64>, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let output = run_benchmark(&cfg)?;
    let episodes_path = out.join("episodes.csv");
    write_episode_csv(&episodes_path, &output.rows)?;
    let summary_path = out.join("summary.csv");
    write_summary_csv(&summary_path, &output.summaries)?;
    for (row, ep) in output.rows.iter().zip(&output.episodes) {
        let path = out.join(format!("ep_{}_{}.csv", row.scheme.label(), row.seed));
        write_trajectory_csv(&path, &ep.log)?;
    }

    let pair = |p: Option<(f64, f64)>| match p {
        Some((m, s)) => format!("{m:.3} ± {s:.3}"),
        None => "-".into(),
    };
    for s in &output.summaries {
        println!(
            "{:<10} episodes {:>3}  S_R {:>5.1}%  T_c {:>5.1}%  N_c {:>2}  R_lm {:>2}  \
             d {}  v {}  t_exec {}  J_acc {}  zeta_acc {}",
            s.scheme.label(),
            s.episodes,
            s.s_r,
            s.t_c,
            s.n_c,
            s.r_lm,
            pair(s.d_av),
            pair(s.v_av),
            pair(s.t_exec_ms),
            fmt_opt(s.j_acc),
            fmt_opt(s.zeta_acc),
        );
    }
    println!("wrote {}", episodes_path.display());
    println!("wrote {}", summary_path.display());
    println!("wrote {} trajectory logs under {}", output.rows.len(), out.display());
    Ok(())
}

fn cmd_oracle(samples: usize, seed: u64) -> Result<()> {
    println!("scalar grid: Q = 2, {samples} samples per point, seed {seed}");
    println!(
        "{:>6} {:>6} {:>6} {:>14} {:>14} {:>10}",
        "gamma", "sigma", "err", "closed_form", "monte_carlo", "rel_err"
    );
    let q = Vector1::new(2.0f64);
    let mut worst: f64 = 0.0;
    for &gamma in &[-0.5f64, 1.0, 2.0] {
        for &sigma in &[0.0f64, 0.1, 0.5] {
            for &err in &[0.0f64, 1.0, 2.0] {
                let e = Vector1::new(err);
                let cov = Matrix1::new(sigma);
                let exact = risk_sensitive_cost(&e, &cov, &q, gamma);
                let mc = mc_rs_oracle(&e, &cov, &q, gamma, samples, seed)?;
                let rel = if exact.abs() > 1e-12 {
                    ((mc - exact) / exact).abs()
                } else {
                    (mc - exact).abs()
                };
                worst = worst.max(rel);
                println!(
                    "{gamma:>6} {sigma:>6} {err:>6} {exact:>14.8} {mc:>14.8} {rel:>10.3e}"
                );
            }
        }
    }
    println!("worst relative error: {worst:.3e}");
    Ok(())
}

fn cmd_gen_world(cfg: BenchmarkConfig<f64>, seed: u64, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let map = generate_forest(&cfg.episode.forest, seed)?;
    let txt = out.join(format!("world_{seed}.txt"));
    map.save(&txt)?;
    let grid = build_known_costmap(
        &map,
        cfg.episode.costmap.resolution,
        cfg.episode.costmap.inflation_radius,
    );
    let pgm = out.join(format!("world_{seed}.pgm"));
    grid.save_pgm(&pgm)?;
    let spacing = map.min_pairwise_distance().unwrap_or(f64::INFINITY);
    println!(
        "{} obstacles over {} × {} m (min spacing {:.3} m)",
        map.obstacles.len(),
        map.width,
        map.height,
        spacing
    );
    println!("wrote {}", txt.display());
    println!("wrote {}", pgm.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, preset, seed, scheme, out } => {
            let cfg = build_config(&preset, &config, seed, &scheme)?;
            cmd_run(cfg, &out)
        }
        Cmd::Bench { config, preset, seed, scheme, out, timing } => {
            let mut cfg = build_config(&preset, &config, seed, &scheme)?;
            cfg.measure_timing = cfg.measure_timing || timing;
            cmd_bench(cfg, &out)
        }
        Cmd::Oracle { samples, seed } => cmd_oracle(samples, seed),
        Cmd::GenWorld { config, preset, seed, out } => {
            let cfg = build_config(&preset, &config, None, &None)?;
            cmd_gen_world(cfg, seed, &out)
        }
    }
}
