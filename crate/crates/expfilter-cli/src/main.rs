//! Command-line driver for the expansion filter.
//!
//! Every subcommand loads one experiment configuration (TOML file or the
//! built-in cubic-sensor defaults), runs deterministically from the seed,
//! and writes CSV files into `--out`. Timing goes to stdout only, so output
//! files are byte-identical across reruns.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration,
//! 3 a simulated or filtered path left the finite range.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use expfilter::baselines::{particle_filter, PfOptions};
use expfilter::density::{find_modes, trapezoid, DensityCorrection, DensityEngine};
use expfilter::filter::{assemble, clip_coefficients, ExpansionEngine};
use expfilter::harness::{
    fmt_value, integrated_squared_error, mean, median, run_ensemble, write_columns_csv,
    write_sweep_csv, DensitySettings, EnsembleResult, ExperimentConfig, PfSettings,
};
use expfilter::sim::{path_seed, simulate_path, SamplePath};
use expfilter::{Error, Result};

#[derive(Parser)]
#[command(
    name = "expfilter",
    version,
    about = "Expansion-based nonlinear filtering for perturbed linear observation models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Omit for the built-in cubic sensor.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for CSV output; created if missing.
    #[arg(long, default_value = ".", global = true)]
    out: PathBuf,

    /// Override the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured number of ensemble paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one signal/observation path and write `path.csv`.
    Simulate,
    /// Filter one path and write the estimate time series `timeseries.csv`.
    Filter(ClipArg),
    /// Filter an ensemble of paths and write per-path errors `ensemble.csv`.
    Ensemble,
    /// Sweep clip ratios over an ensemble and write `sweep.csv`.
    SweepR,
    /// Evaluate the corrected filtering density and write `density.csv`.
    Density,
    /// Compare the expansion filter against a particle filter on one path.
    Compare(ClipArg),
}

#[derive(Args)]
struct ClipArg {
    /// Clip ratio for the stabilized estimates; `inf` disables clipping.
    #[arg(long, default_value_t = 0.2)]
    clip_r: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Invalid(_) => ExitCode::from(2),
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Sizes the global worker pool from `EXPFILTER_WORKERS` when set.
fn init_workers() {
    if let Ok(v) = std::env::var("EXPFILTER_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid EXPFILTER_WORKERS value `{v}`"),
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    fs::create_dir_all(&cli.common.out)?;
    let out = cli.common.out.as_path();
    let started = Instant::now();
    let code = match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, out)?,
        Command::Filter(clip) => cmd_filter(&cfg, out, clip.validated()?)?,
        Command::Ensemble => cmd_ensemble(&cfg, out)?,
        Command::SweepR => cmd_sweep(&cfg, out)?,
        Command::Density => cmd_density(&cfg, out)?,
        Command::Compare(clip) => cmd_compare(&cfg, out, clip.validated()?)?,
    };
    println!("done in {:.2}s", started.elapsed().as_secs_f64());
    Ok(code)
}

impl ClipArg {
    fn validated(&self) -> Result<f64> {
        if self.clip_r > 0.0 {
            Ok(self.clip_r)
        } else {
            Err(Error::Config("--clip-r must be positive".into()))
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::cubic_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.paths {
        if p == 0 {
            return Err(Error::Config("--paths must be >= 1".into()));
        }
        cfg.n_paths = p;
    }
    Ok(cfg)
}

/// The single path used by one-path subcommands; matches path 0 of an
/// ensemble run under the same configuration.
fn single_path(cfg: &ExperimentConfig) -> Result<(u64, SamplePath)> {
    let seed = path_seed(cfg.seed, 0);
    let path = simulate_path(&cfg.model, &cfg.grid, seed)?;
    Ok((seed, path))
}

fn time_column(cfg: &ExperimentConfig) -> Vec<f64> {
    (0..cfg.grid.len()).map(|k| cfg.grid.time(k)).collect()
}

fn report_written(path: &Path, rows: usize) {
    println!("wrote {} ({rows} rows)", path.display());
}

fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    let (seed, path) = single_path(cfg)?;
    let t = time_column(cfg);
    let file = out.join("path.csv");
    write_columns_csv(&file, &[("t", &t), ("x", &path.x), ("y", &path.y)])?;
    println!("simulated {} steps with seed {seed}", cfg.grid.n_steps);
    report_written(&file, t.len());
    Ok(ExitCode::SUCCESS)
}

/// Estimate columns shared by `filter` and `compare`: the linear-filter mean
/// plus the totals of each correction order, raw and clipped.
struct EstimateColumns {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

fn estimate_columns(
    cfg: &ExperimentConfig,
    path: &SamplePath,
    clip_r: f64,
) -> Result<EstimateColumns> {
    let engine = ExpansionEngine::new(&cfg.model, cfg.order)?;
    let coeffs = engine.run(path)?;
    let clipped = clip_coefficients(&coeffs.coef, cfg.model.epsilon, clip_r)?;
    let mut names = vec!["mu".to_string()];
    let mut cols = vec![coeffs.coef[0].clone()];
    for m in 1..=cfg.order {
        names.push(format!("n{m}"));
        cols.push(assemble(&coeffs.coef[..=m], cfg.model.epsilon));
    }
    for m in 1..=cfg.order {
        names.push(format!("ntilde{m}"));
        cols.push(assemble(&clipped[..=m], cfg.model.epsilon));
    }
    Ok(EstimateColumns { names, cols })
}

fn write_named_columns(file: &Path, named: &[(String, Vec<f64>)]) -> Result<()> {
    let borrowed: Vec<(&str, &[f64])> =
        named.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    write_columns_csv(file, &borrowed)
}

fn cmd_filter(cfg: &ExperimentConfig, out: &Path, clip_r: f64) -> Result<ExitCode> {
    let (seed, path) = single_path(cfg)?;
    let est = estimate_columns(cfg, &path, clip_r)?;

    let mut named: Vec<(String, Vec<f64>)> = vec![
        ("t".into(), time_column(cfg)),
        ("x".into(), path.x.clone()),
        ("y".into(), path.y.clone()),
    ];
    named.extend(est.names.into_iter().zip(est.cols));
    if let Some(pf) = &cfg.pf {
        let mut opts = PfOptions::new(pf.particles, seed);
        opts.ess_fraction = pf.ess_fraction;
        let res = particle_filter(&cfg.model, &path, &opts)?;
        named.push(("pf_mean".into(), res.mean));
    }

    println!("seed {seed}, clip ratio {clip_r}");
    for (name, col) in named.iter().skip(3) {
        let ise = integrated_squared_error(&path.x, col, cfg.grid.dt);
        println!("  ISE[{name}] = {ise:.6e}");
    }
    let file = out.join("timeseries.csv");
    write_named_columns(&file, &named)?;
    report_written(&file, cfg.grid.len());
    Ok(ExitCode::SUCCESS)
}

/// Shared tail for the two ensemble-shaped commands: report failures to
/// stderr and map any diverged path to exit code 3.
fn ensemble_exit(res: &EnsembleResult, n_paths: usize) -> ExitCode {
    let n_failed = res.n_failed();
    if n_failed == 0 {
        return ExitCode::SUCCESS;
    }
    for p in &res.per_path {
        if let Some(err) = &p.error {
            eprintln!("path {} (seed {}): {err}", p.path_index, p.seed);
        }
    }
    eprintln!("error: {n_failed} of {n_paths} paths diverged; statistics cover the rest");
    ExitCode::from(3)
}

fn cmd_ensemble(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    let res = run_ensemble(cfg)?;

    let mut buf = String::from("path,seed,variant,ise\n");
    for p in res.per_path.iter().filter(|p| p.error.is_none()) {
        for m in 0..=res.order {
            buf.push_str(&format!(
                "{},{},order{m},{}\n",
                p.path_index,
                p.seed,
                fmt_value(p.ise_raw[m])
            ));
        }
        for (ri, &r) in res.r_values.iter().enumerate() {
            for m in 1..=res.order {
                buf.push_str(&format!(
                    "{},{},order{m}_r{r},{}\n",
                    p.path_index,
                    p.seed,
                    fmt_value(p.ise_clipped[ri][m - 1])
                ));
            }
        }
    }
    let file = out.join("ensemble.csv");
    fs::write(&file, &buf)?;

    println!("{} paths, order {}", cfg.n_paths, res.order);
    for m in 0..=res.order {
        let col = res.raw_ise_column(m);
        if !col.is_empty() {
            println!(
                "  order {m}: mean ISE {:.6e}, median ISE {:.6e}",
                mean(&col),
                median(&col)
            );
        }
    }
    report_written(&file, buf.lines().count() - 1);
    Ok(ensemble_exit(&res, cfg.n_paths))
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    let res = run_ensemble(cfg)?;
    let rows = res.sweep_rows();
    let file = out.join("sweep.csv");
    write_sweep_csv(&file, &rows)?;

    for m in 1..=res.order {
        if let Some(best) = rows
            .iter()
            .filter(|row| row.order == m)
            .min_by(|a, b| a.mean_ise.total_cmp(&b.mean_ise))
        {
            println!("  order {m}: best r = {} (mean ISE {:.6e})", best.r, best.mean_ise);
        }
    }
    report_written(&file, rows.len());
    Ok(ensemble_exit(&res, cfg.n_paths))
}

fn cmd_density(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    let settings = cfg.density.clone().unwrap_or(DensitySettings {
        t: cfg.grid.t_end,
        k_max: cfg.model.j as usize + 1,
        grid_points: 1001,
        half_width: 6.0,
    });
    let engine = DensityEngine::new(&cfg.model, settings.k_max)?;
    let (seed, path) = single_path(cfg)?;
    let corr = engine.run(&path, cfg.grid.index_of(settings.t))?;

    let xs = corr.default_grid(settings.half_width, settings.grid_points);
    let corrected = corr.eval_grid(&xs);
    let base = DensityCorrection { epsilon: 0.0, ..corr.clone() };
    let gaussian = base.eval_grid(&xs);

    println!("seed {seed}, density at t = {}", settings.t);
    println!("  posterior mean {:.6}, variance {:.6}", corr.mu, corr.gamma);
    println!("  corrected mass on grid: {:.8}", trapezoid(&xs, &corrected));
    let modes = find_modes(&xs, &corrected, 0.05);
    let rendered: Vec<String> = modes.iter().map(|m| format!("{m:.4}")).collect();
    println!("  modes: [{}]", rendered.join(", "));

    let file = out.join("density.csv");
    write_columns_csv(
        &file,
        &[("x", &xs), ("gaussian", &gaussian), ("corrected", &corrected)],
    )?;
    report_written(&file, xs.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(cfg: &ExperimentConfig, out: &Path, clip_r: f64) -> Result<ExitCode> {
    let pf_settings = cfg
        .pf
        .clone()
        .unwrap_or(PfSettings { particles: 10_000, ess_fraction: 0.5 });
    let (seed, path) = single_path(cfg)?;
    let est = estimate_columns(cfg, &path, clip_r)?;

    let mut opts = PfOptions::new(pf_settings.particles, seed);
    opts.ess_fraction = pf_settings.ess_fraction;
    let pf = particle_filter(&cfg.model, &path, &opts)?;

    println!(
        "seed {seed}, {} particles, clip ratio {clip_r}",
        pf_settings.particles
    );
    println!("  minimum ESS {:.1}, degenerate steps {}", pf.min_ess, pf.degenerate_steps);
    for (name, col) in est.names.iter().zip(&est.cols) {
        println!(
            "  ISE[{name}] = {:.6e}",
            integrated_squared_error(&path.x, col, cfg.grid.dt)
        );
    }
    println!(
        "  ISE[pf_mean] = {:.6e}",
        integrated_squared_error(&path.x, &pf.mean, cfg.grid.dt)
    );

    let mut named: Vec<(String, Vec<f64>)> = vec![
        ("t".into(), time_column(cfg)),
        ("x".into(), path.x.clone()),
    ];
    named.extend(est.names.into_iter().zip(est.cols));
    named.push(("pf_mean".into(), pf.mean));
    let file = out.join("compare.csv");
    write_named_columns(&file, &named)?;
    report_written(&file, cfg.grid.len());
    Ok(ExitCode::SUCCESS)
}
