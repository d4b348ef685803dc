//! Timing harness for gradient computation cost versus horizon and parameter count.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::model::{generate_data, DataGenConfig, ModelSpec, Trajectory, Vector};
use crate::models::with_polynomial;
use crate::oracle::naive_gradient;
use crate::sensitivity::{full_gradient, GradientOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Recursive,
    Naive,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Recursive => "recursive",
            Method::Naive => "naive",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(Method::Recursive),
            "naive" => Ok(Method::Naive),
            other => Err(Error::Data(format!("unknown benchmark method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub horizons: Vec<usize>,
    /// Polynomial correction sizes to sweep; `0` times the bare model.
    #[serde(default = "default_poly_terms")]
    pub poly_terms: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Include the cubic method.
    #[serde(default = "default_true")]
    pub naive: bool,
    /// Lower bound on the duration of a single timing sample.
    #[serde(default = "default_min_sample")]
    pub min_sample_seconds: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_poly_terms() -> Vec<usize> {
    vec![0]
}

fn default_repeats() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn default_min_sample() -> f64 {
    0.02
}

impl BenchConfig {
    pub fn new(horizons: Vec<usize>, repeats: usize) -> Self {
        Self {
            horizons,
            poly_terms: default_poly_terms(),
            repeats,
            naive: true,
            min_sample_seconds: default_min_sample(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.poly_terms.is_empty() {
            return Err(Error::Config("benchmark horizon and parameter lists must be non-empty".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("benchmark horizons must be positive".into()));
        }
        if self.repeats < 3 {
            return Err(Error::Config(format!("benchmark repeats must be at least 3, got {}", self.repeats)));
        }
        if !(self.min_sample_seconds >= 0.0) {
            return Err(Error::Config("min_sample_seconds must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n_x: usize,
    pub n_vartheta: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least squares line through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
    })
}

impl BenchTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.write_record([
                row.method.as_str().to_string(),
                row.horizon.to_string(),
                row.n_x.to_string(),
                row.n_vartheta.to_string(),
                format!("{:e}", row.median_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::Data(format!("unexpected benchmark header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Data("short benchmark row".into()));
            let num = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| Error::Data(format!("bad integer in column {i}"))) };
            rows.push(BenchRow {
                method: Method::parse(field(0)?)?,
                horizon: num(1)?,
                n_x: num(2)?,
                n_vartheta: num(3)?,
                median_seconds: field(4)?.parse().map_err(|_| Error::Data("bad median_seconds".into()))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn get(&self, method: Method, horizon: usize, n_vartheta: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.horizon == horizon && r.n_vartheta == n_vartheta)
            .map(|r| r.median_seconds)
    }

    /// Slope of time versus horizon for one method at fixed `n_ϑ`.
    pub fn horizon_slope(&self, method: Method, n_vartheta: usize) -> Option<SlopeFit> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.n_vartheta == n_vartheta)
            .map(|r| (r.horizon as f64, r.median_seconds))
            .collect();
        loglog_slope(&pts)
    }

    /// Slope of time versus `n_ϑ` for one method at a fixed horizon.
    pub fn parameter_slope(&self, method: Method, horizon: usize) -> Option<SlopeFit> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.horizon == horizon)
            .map(|r| (r.n_vartheta as f64, r.median_seconds))
            .collect();
        loglog_slope(&pts)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.n_vartheta).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut horizons: Vec<usize> = self.rows.iter().map(|r| r.horizon).collect();
        horizons.sort_unstable();
        horizons.dedup();

        for &p in &sizes {
            let _ = writeln!(out, "n_vartheta = {p}");
            let _ = writeln!(out, "{:>8}  {:>14}  {:>14}  {:>10}", "T", "recursive [s]", "naive [s]", "speedup");
            for &t in &horizons {
                let rec = self.get(Method::Recursive, t, p);
                let naive = self.get(Method::Naive, t, p);
                let cell = |v: Option<f64>| v.map_or("-".to_string(), |s| format!("{s:.3e}"));
                let speedup = match (rec, naive) {
                    (Some(r), Some(n)) => format!("{:.1}x", n / r),
                    _ => "-".into(),
                };
                let _ = writeln!(out, "{t:>8}  {:>14}  {:>14}  {speedup:>10}", cell(rec), cell(naive));
            }
            for method in [Method::Recursive, Method::Naive] {
                if let Some(fit) = self.horizon_slope(method, p) {
                    let _ = writeln!(out, "log-log slope in T ({}): {:.3}", method.as_str(), fit.slope);
                }
            }
            let _ = writeln!(out);
        }
        if sizes.len() > 1 {
            for &t in &horizons {
                if let Some(fit) = self.parameter_slope(Method::Recursive, t) {
                    let _ = writeln!(out, "log-log slope in n_vartheta (recursive, T = {t}): {:.3}", fit.slope);
                }
            }
        }
        out
    }
}

pub const CSV_HEADER: [&str; 5] = ["method", "T", "n_x", "n_vartheta", "median_seconds"];

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median seconds per call of `f`. Each sample repeats `f` enough times to last at
/// least `min_sample` seconds; one untimed warm-up precedes the samples.
pub fn time_median<F: FnMut() -> Result<()>>(mut f: F, repeats: usize, min_sample: f64) -> Result<f64> {
    let start = Instant::now();
    f()?;
    let single = start.elapsed().as_secs_f64().max(1e-9);
    let inner = ((min_sample / single).ceil() as usize).clamp(1, 1_000_000);
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(median(&mut samples))
}

/// Noiseless benchmark data from a nominal parameter near the evaluation point.
fn bench_problem(model: &ModelSpec, horizon: usize, seed: u64) -> Result<(Trajectory, Vector, Vector)> {
    let n_x = model.n_x();
    let theta = Vector::from_fn(model.n_theta(), |i, _| 1.0 + i as f64);
    let x0 = Vector::from_fn(n_x, |i, _| 0.1 * (i as f64 + 1.0));
    let inputs = vec![Vector::zeros(model.n_u()); horizon + 1];
    let mut cfg = DataGenConfig::noiseless(theta.clone(), x0.clone());
    cfg.seed = seed;
    let traj = generate_data(model, &cfg, &inputs)?;
    let mut vartheta = Vector::zeros(model.n_vartheta());
    for i in 0..theta.len() {
        vartheta[i] = theta[i] * 1.05;
    }
    Ok((traj, x0, vartheta))
}

/// Median timings of the recursive and (optionally) naive gradient for every horizon and
/// polynomial correction size in `cfg`. Runs sequentially on the calling thread.
pub fn scaling_benchmark(model: &ModelSpec, cfg: &BenchConfig) -> Result<BenchTable> {
    cfg.validate()?;
    let loss = LossSpec::squared_error(model.n_z());
    let opts = GradientOptions::lean();
    let mut table = BenchTable::default();
    for &terms in &cfg.poly_terms {
        let m = if terms == 0 { model.clone() } else { with_polynomial(model.clone(), terms)? };
        for &horizon in &cfg.horizons {
            let (traj, x0, vartheta) = bench_problem(&m, horizon, cfg.seed)?;
            let reference = full_gradient(&m, &loss, &traj, &x0, &vartheta, &opts)?;
            if reference.exploded() {
                return Err(Error::Escape {
                    step: reference.report.explosion_step.unwrap_or(0),
                });
            }
            let rec = time_median(
                || {
                    let pass = full_gradient(&m, &loss, &traj, &x0, &vartheta, &opts)?;
                    std::hint::black_box(pass.grad_vartheta);
                    Ok(())
                },
                cfg.repeats,
                cfg.min_sample_seconds,
            )?;
            table.rows.push(BenchRow {
                method: Method::Recursive,
                horizon,
                n_x: m.n_x(),
                n_vartheta: m.n_vartheta(),
                median_seconds: rec,
            });
            if cfg.naive {
                let naive = time_median(
                    || {
                        std::hint::black_box(naive_gradient(&m, &loss, &traj, &x0, &vartheta)?);
                        Ok(())
                    },
                    cfg.repeats,
                    cfg.min_sample_seconds,
                )?;
                table.rows.push(BenchRow {
                    method: Method::Naive,
                    horizon,
                    n_x: m.n_x(),
                    n_vartheta: m.n_vartheta(),
                    median_seconds: naive,
                });
            }
        }
    }
    Ok(table)
}
