//! Experiment orchestration: TOML configuration, ensemble runs, error
//! metrics, and deterministic CSV output.
//!
//! Output files are fully determined by the configuration and seed: floats
//! are printed with 17 significant digits, rows end in `\n`, and nothing
//! time- or machine-dependent is written.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use toml::Value;

use crate::error::{Error, Result};
use crate::filter::{assemble, clip_coefficients, ExpansionEngine};
use crate::sim::{path_seed, simulate_path, ModelParams, TimeGrid};

type Table = toml::map::Map<String, Value>;

/// Clip ratios swept by default: 0.1 .. 1.0 plus "no clipping".
pub fn default_r_values() -> Vec<f64> {
    let mut v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    v.push(f64::INFINITY);
    v
}

#[derive(Debug, Clone)]
pub struct PfSettings {
    pub particles: usize,
    pub ess_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct DensitySettings {
    /// Time at which to evaluate the corrected density.
    pub t: f64,
    pub k_max: usize,
    pub grid_points: usize,
    /// Grid half width in posterior standard deviations.
    pub half_width: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub grid: TimeGrid,
    pub order: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub r_values: Vec<f64>,
    pub pf: Option<PfSettings>,
    pub density: Option<DensitySettings>,
}

impl ExperimentConfig {
    /// Built-in cubic-sensor setup, used when no file is given.
    pub fn cubic_default() -> Self {
        ExperimentConfig {
            model: ModelParams::new(-0.4, 0.5, 1.0, 0.3, 0.2, 3).expect("valid defaults"),
            grid: TimeGrid::new(10.0, 0.01).expect("valid defaults"),
            order: 2,
            n_paths: 1,
            seed: 0,
            r_values: default_r_values(),
            pf: None,
            density: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: Value = text
            .parse()
            .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
        let root = root
            .as_table()
            .ok_or_else(|| Error::Config("configuration must be a TOML table".into()))?;
        check_keys(root, "top level", &["model", "grid", "run", "sweep", "pf", "density"])?;

        let model_t = required_section(root, "model")?;
        check_keys(model_t, "model", &["a", "b", "c", "sigma", "epsilon", "j"])?;
        let model = ModelParams::new(
            req_f64(model_t, "model", "a")?,
            req_f64(model_t, "model", "b")?,
            req_f64(model_t, "model", "c")?,
            req_f64(model_t, "model", "sigma")?,
            req_f64(model_t, "model", "epsilon")?,
            req_usize(model_t, "model", "j")? as u32,
        )?;

        let grid_t = required_section(root, "grid")?;
        check_keys(grid_t, "grid", &["t_end", "dt"])?;
        let grid = TimeGrid::new(
            req_f64(grid_t, "grid", "t_end")?,
            req_f64(grid_t, "grid", "dt")?,
        )?;

        let (mut order, mut n_paths, mut seed) = (2usize, 1usize, 0u64);
        if let Some(run_t) = section(root, "run")? {
            check_keys(run_t, "run", &["order", "n_paths", "seed"])?;
            if let Some(v) = get_usize(run_t, "run", "order")? {
                order = v;
            }
            if let Some(v) = get_usize(run_t, "run", "n_paths")? {
                n_paths = v;
            }
            if let Some(v) = get_u64(run_t, "run", "seed")? {
                seed = v;
            }
        }
        if n_paths == 0 {
            return Err(Error::Config("run.n_paths must be >= 1".into()));
        }

        let mut r_values = default_r_values();
        if let Some(sweep_t) = section(root, "sweep")? {
            check_keys(sweep_t, "sweep", &["r_values"])?;
            if let Some(v) = sweep_t.get("r_values") {
                r_values = parse_number_array(v, "sweep.r_values")?;
            }
        }
        if r_values.is_empty() || r_values.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::Config(
                "sweep.r_values must be a non-empty list of positive ratios".into(),
            ));
        }

        let pf = match section(root, "pf")? {
            None => None,
            Some(t) => {
                check_keys(t, "pf", &["particles", "ess_fraction"])?;
                let particles = req_usize(t, "pf", "particles")?;
                let ess_fraction = get_f64(t, "pf", "ess_fraction")?.unwrap_or(0.5);
                Some(PfSettings { particles, ess_fraction })
            }
        };

        let density = match section(root, "density")? {
            None => None,
            Some(t) => {
                check_keys(t, "density", &["t", "k_max", "grid_points", "half_width"])?;
                let at = req_f64(t, "density", "t")?;
                let k_max =
                    get_usize(t, "density", "k_max")?.unwrap_or(model.j as usize + 1);
                let grid_points = get_usize(t, "density", "grid_points")?.unwrap_or(1001);
                let half_width = get_f64(t, "density", "half_width")?.unwrap_or(6.0);
                if !(at > 0.0 && at <= grid.t_end) {
                    return Err(Error::Config(
                        "density.t must lie in (0, t_end]".into(),
                    ));
                }
                Some(DensitySettings { t: at, k_max, grid_points, half_width })
            }
        };

        Ok(ExperimentConfig { model, grid, order, n_paths, seed, r_values, pf, density })
    }
}

fn required_section<'a>(root: &'a Table, name: &str) -> Result<&'a Table> {
    section(root, name)?
        .ok_or_else(|| Error::Config(format!("missing required section [{name}]")))
}

fn section<'a>(root: &'a Table, name: &str) -> Result<Option<&'a Table>> {
    match root.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(Error::Config(format!("[{name}] must be a table"))),
    }
}

fn check_keys(t: &Table, section: &str, allowed: &[&str]) -> Result<()> {
    for k in t.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Config(format!(
                "unknown key `{k}` in {section}; allowed: {}",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn get_f64(t: &Table, section: &str, key: &str) -> Result<Option<f64>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Float(x)) => Ok(Some(*x)),
        Some(Value::Integer(x)) => Ok(Some(*x as f64)),
        Some(_) => Err(Error::Config(format!("{section}.{key} must be a number"))),
    }
}

fn req_f64(t: &Table, section: &str, key: &str) -> Result<f64> {
    get_f64(t, section, key)?
        .ok_or_else(|| Error::Config(format!("missing {section}.{key}")))
}

fn get_usize(t: &Table, section: &str, key: &str) -> Result<Option<usize>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(x)) if *x >= 0 => Ok(Some(*x as usize)),
        Some(_) => Err(Error::Config(format!(
            "{section}.{key} must be a non-negative integer"
        ))),
    }
}

fn req_usize(t: &Table, section: &str, key: &str) -> Result<usize> {
    get_usize(t, section, key)?
        .ok_or_else(|| Error::Config(format!("missing {section}.{key}")))
}

fn get_u64(t: &Table, section: &str, key: &str) -> Result<Option<u64>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(x)) if *x >= 0 => Ok(Some(*x as u64)),
        Some(_) => Err(Error::Config(format!(
            "{section}.{key} must be a non-negative integer"
        ))),
    }
}

fn parse_number_array(v: &Value, what: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{what} must be an array")))?;
    arr.iter()
        .map(|x| match x {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(Error::Config(format!("{what} must contain only numbers"))),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Left-Riemann integral of the squared difference over the grid:
/// `sum_{k=0}^{n-2} (x_k - f_k)^2 dt` for arrays of length `n`.
pub fn integrated_squared_error(truth: &[f64], estimate: &[f64], dt: f64) -> f64 {
    assert_eq!(truth.len(), estimate.len());
    let n = truth.len();
    let mut acc = 0.0;
    for k in 0..n.saturating_sub(1) {
        let d = truth[k] - estimate[k];
        acc += d * d;
    }
    acc * dt
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median with the even-length convention of averaging the middle two.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-comparable value in median"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Ensemble runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PathResult {
    pub path_index: usize,
    pub seed: u64,
    /// Populated when simulation or filtering failed; metric fields are
    /// empty in that case.
    pub error: Option<String>,
    /// ISE of the order-`m` estimate (corrections up to `m`, unclipped),
    /// `m = 0..=order`.
    pub ise_raw: Vec<f64>,
    /// ISE of the clipped estimates: `[r_index][m - 1]` for `m = 1..=order`.
    pub ise_clipped: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub order: usize,
    pub r_values: Vec<f64>,
    pub per_path: Vec<PathResult>,
}

/// Mean ISE over successful paths for one estimator variant of the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub r: f64,
    pub order: usize,
    pub mean_ise: f64,
}

pub fn run_ensemble(config: &ExperimentConfig) -> Result<EnsembleResult> {
    let engine = ExpansionEngine::new(&config.model, config.order)?;
    let eps = config.model.epsilon;
    let per_path: Vec<PathResult> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = path_seed(config.seed, i as u64);
            let run = || -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
                let path = simulate_path(&config.model, &config.grid, seed)?;
                let coeffs = engine.run(&path)?;
                let dt = config.grid.dt;
                let ise_raw: Vec<f64> = (0..=config.order)
                    .map(|m| {
                        integrated_squared_error(
                            &path.x,
                            &assemble(&coeffs.coef[..=m], eps),
                            dt,
                        )
                    })
                    .collect();
                let ise_clipped: Vec<Vec<f64>> = config
                    .r_values
                    .iter()
                    .map(|&r| {
                        let clipped = clip_coefficients(&coeffs.coef, eps, r)?;
                        Ok((1..=config.order)
                            .map(|m| {
                                integrated_squared_error(
                                    &path.x,
                                    &assemble(&clipped[..=m], eps),
                                    dt,
                                )
                            })
                            .collect())
                    })
                    .collect::<Result<_>>()?;
                Ok((ise_raw, ise_clipped))
            };
            match run() {
                Ok((ise_raw, ise_clipped)) => PathResult {
                    path_index: i,
                    seed,
                    error: None,
                    ise_raw,
                    ise_clipped,
                },
                Err(e) => PathResult {
                    path_index: i,
                    seed,
                    error: Some(e.to_string()),
                    ise_raw: Vec::new(),
                    ise_clipped: Vec::new(),
                },
            }
        })
        .collect();
    Ok(EnsembleResult {
        order: config.order,
        r_values: config.r_values.clone(),
        per_path,
    })
}

impl EnsembleResult {
    pub fn n_failed(&self) -> usize {
        self.per_path.iter().filter(|p| p.error.is_some()).count()
    }

    /// ISE values of the order-`m` unclipped estimate across successful
    /// paths.
    pub fn raw_ise_column(&self, m: usize) -> Vec<f64> {
        self.per_path
            .iter()
            .filter(|p| p.error.is_none())
            .map(|p| p.ise_raw[m])
            .collect()
    }

    /// ISE values of the order-`m` clipped estimate at `r_values[r_idx]`.
    pub fn clipped_ise_column(&self, r_idx: usize, m: usize) -> Vec<f64> {
        assert!(m >= 1);
        self.per_path
            .iter()
            .filter(|p| p.error.is_none())
            .map(|p| p.ise_clipped[r_idx][m - 1])
            .collect()
    }

    /// Sweep table: mean ISE per (clip ratio, order).
    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        let mut out = Vec::new();
        for (r_idx, &r) in self.r_values.iter().enumerate() {
            for m in 1..=self.order {
                let col = self.clipped_ise_column(r_idx, m);
                out.push(SweepRow { r, order: m, mean_ise: mean(&col) });
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// 17 significant digits; round-trips f64 exactly.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes equally long columns as CSV with an LF after every row.
pub fn write_columns_csv(path: &Path, columns: &[(&str, &[f64])]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(Error::invalid("CSV columns must share one length"));
    }
    let mut out = String::new();
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for k in 0..n {
        for (i, (_, col)) in columns.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&fmt_value(col[k]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the sweep table as `r,variant,mean_ise` rows.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("r,variant,mean_ise\n");
    for row in rows {
        out.push_str(&format!(
            "{},order{},{}\n",
            fmt_value(row.r),
            row.order,
            fmt_value(row.mean_ise)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
a = -0.4
b = 0.5
c = 1
sigma = 0.3
epsilon = 0.2
j = 3

[grid]
t_end = 2.0
dt = 0.01

[run]
order = 2
n_paths = 3
seed = 77

[sweep]
r_values = [0.2, 0.5, inf]
"#;

    #[test]
    fn parses_a_full_configuration() {
        let cfg = ExperimentConfig::from_toml_str(GOOD).unwrap();
        assert_eq!(cfg.model.j, 3);
        assert_eq!(cfg.model.c, 1.0);
        assert_eq!(cfg.grid.n_steps, 200);
        assert_eq!(cfg.order, 2);
        assert_eq!(cfg.n_paths, 3);
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.r_values.len(), 3);
        assert!(cfg.r_values[2].is_infinite());
        assert!(cfg.pf.is_none());
    }

    #[test]
    fn rejects_unknown_keys_and_missing_sections() {
        let bad = GOOD.replace("epsilon", "epsilonn");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("epsilonn"), "{err}");
        let err = ExperimentConfig::from_toml_str("[grid]\nt_end = 1.0\ndt = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("[model]"), "{err}");
        let bad = GOOD.replace("[sweep]", "[sweeps]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn rejects_bad_ratio_lists() {
        let bad = GOOD.replace("[0.2, 0.5, inf]", "[0.0]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = GOOD.replace("[0.2, 0.5, inf]", "[-1.0]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn ise_is_a_left_riemann_sum() {
        let truth = [1.0, 2.0, 3.0];
        let est = [0.0, 0.0, 100.0]; // final point never enters
        assert!((integrated_squared_error(&truth, &est, 0.5) - 0.5 * (1.0 + 4.0)).abs() < 1e-15);
        assert_eq!(integrated_squared_error(&truth, &truth, 0.5), 0.0);
    }

    #[test]
    fn median_averages_the_middle_pair() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn ensemble_runs_are_deterministic() {
        let mut cfg = ExperimentConfig::from_toml_str(GOOD).unwrap();
        cfg.r_values = vec![0.2, f64::INFINITY];
        let r1 = run_ensemble(&cfg).unwrap();
        let r2 = run_ensemble(&cfg).unwrap();
        assert_eq!(r1.n_failed(), 0);
        for (p1, p2) in r1.per_path.iter().zip(&r2.per_path) {
            assert_eq!(p1.ise_raw, p2.ise_raw);
            assert_eq!(p1.ise_clipped, p2.ise_clipped);
        }
        // every column is populated and finite
        for m in 0..=2 {
            let col = r1.raw_ise_column(m);
            assert_eq!(col.len(), 3);
            assert!(col.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert_eq!(r1.sweep_rows().len(), 4);
        // unclipped order-m columns match the r = inf clipped ones
        for m in 1..=2 {
            assert_eq!(r1.raw_ise_column(m), r1.clipped_ise_column(1, m));
        }
    }

    #[test]
    fn csv_output_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cols.csv");
        let a = [1.5, -2.0];
        let b = [0.0, 3.25];
        write_columns_csv(&p, &[("a", &a), ("b", &b)]).unwrap();
        let first = fs::read(&p).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert!(text.contains("1.5000000000000000e0"));
        assert!(!text.contains('\r'));
        write_columns_csv(&p, &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert!(write_columns_csv(&p, &[("a", &a), ("b", &b[..1])]).is_err());
    }
}
