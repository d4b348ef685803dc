//! Experiment configuration and runners behind the command-line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::{scaling_benchmark, BenchConfig, BenchTable};
use crate::error::{check_len, Error, Result};
use crate::gradcheck::{gradcheck, GradcheckReport, Tolerances};
use crate::loss::{BarrierTerm, LossSpec};
use crate::model::{generate_data, DataGenConfig, Matrix, ModelSpec, Trajectory, Vector};
use crate::models::{model_by_name, with_polynomial, FaultyJacobian, JacobianFault};
use crate::monitor::MonitorBounds;
use crate::optim::{identify, write_logs, Identification, OptimizerConfig};
use crate::sensitivity::{GradientOptions, RecordMode};

/// Environment variable holding the worker count for concurrent restarts.
pub const THREADS_ENV: &str = "MSID_THREADS";

fn default_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// `logistic | euler | linear`.
    pub name: String,
    /// Integration step of the Euler model.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Monomials per state in the polynomial correction; `0` disables it.
    #[serde(default)]
    pub poly_terms: usize,
}

impl ModelBlock {
    pub fn build(&self) -> Result<ModelSpec> {
        self.build_with_fault(None)
    }

    pub fn build_with_fault(&self, fault: Option<&FaultBlock>) -> Result<ModelSpec> {
        let mut model = model_by_name(&self.name, self.dt)?;
        if let Some(f) = fault {
            let kind = JacobianFault::parse(&f.jacobian)?;
            model = ModelSpec::new(Arc::new(FaultyJacobian::new(model.shared_dynamics(), kind, f.scale)));
        }
        with_polynomial(model, self.poly_terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBlock {
    pub horizon: usize,
    pub true_theta: Vec<f64>,
    /// Fixed true initial state; drawn per run from `runs.x0` when absent.
    #[serde(default)]
    pub true_x0: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_std_u: f64,
    #[serde(default)]
    pub noise_std_z: f64,
    /// Standard deviation of Gaussian excitation inputs; `0` gives zero inputs.
    #[serde(default)]
    pub input_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    /// Trajectory CSV, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GenerateBlock>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    /// Output weight matrix, row-major; identity when absent.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub barrier: Option<BarrierTerm>,
    /// Ridge coefficient `γ`.
    #[serde(default)]
    pub ridge: f64,
}

impl LossBlock {
    pub fn build(&self, n_z: usize) -> Result<LossSpec> {
        let mut loss = LossSpec::squared_error(n_z).with_ridge(self.ridge);
        if let Some(rows) = &self.weights {
            check_len("loss.weights rows", n_z, rows.len())?;
            for row in rows {
                check_len("loss.weights columns", n_z, row.len())?;
            }
            loss.weights = Matrix::from_fn(n_z, n_z, |i, j| rows[i][j]);
        }
        if let Some(b) = &self.barrier {
            b.validate()?;
            loss = loss.with_barrier(b.clone());
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianInit {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl UniformBox {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from_fn(self.low.len(), |i, _| {
            let (lo, hi) = (self.low[i], self.high[i]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunsBlock {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial physical parameter estimate; correction coefficients start at zero.
    pub theta_init: GaussianInit,
    /// Initial states: the true state of generated data, the initial estimate otherwise.
    pub x0: UniformBox,
    /// Gaussian perturbation of the initial state estimate around the true state.
    #[serde(default)]
    pub x0_init_std: f64,
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultBlock {
    /// `jac_f_x | jac_f_theta`.
    pub jacobian: String,
    #[serde(default = "default_fault_scale")]
    pub scale: f64,
}

fn default_fault_scale() -> f64 {
    1.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckBlock {
    /// Models to check; the top-level model when absent.
    #[serde(default)]
    pub models: Option<Vec<ModelBlock>>,
    #[serde(default = "default_gradcheck_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Deliberately corrupted Jacobian, for exercising the checker.
    #[serde(default)]
    pub jacobian_fault: Option<FaultBlock>,
}

fn default_gradcheck_horizons() -> Vec<usize> {
    vec![1, 5, 20, 100]
}

fn default_points() -> usize {
    20
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub data: Option<DataBlock>,
    #[serde(default)]
    pub loss: LossBlock,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub monitor: MonitorBounds,
    #[serde(default)]
    pub runs: Option<RunsBlock>,
    /// Relative to the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write per-step monitor series into the stability reports.
    #[serde(default)]
    pub monitor_series: bool,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckBlock>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses a config file; relative paths inside resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn data(&self) -> Result<&DataBlock> {
        let data = self.data.as_ref().ok_or_else(|| Error::Config("missing `data` block".into()))?;
        match (&data.path, &data.generate) {
            (Some(_), None) | (None, Some(_)) => Ok(data),
            _ => Err(Error::Config("data: exactly one of `path` and `generate` must be given".into())),
        }
    }

    fn runs(&self) -> Result<&RunsBlock> {
        self.runs.as_ref().ok_or_else(|| Error::Config("missing `runs` block".into()))
    }

    fn grad_options(&self) -> GradientOptions {
        GradientOptions {
            bounds: self.monitor,
            track_norms: true,
            records: if self.monitor_series { RecordMode::Auto } else { RecordMode::Summary },
        }
    }

    /// Checks everything `identify` needs before any run starts.
    pub fn validate_identify(&self) -> Result<ModelSpec> {
        let model = self.model.build()?;
        self.monitor.validate()?;
        self.optimizer.validate()?;
        self.loss.build(model.n_z())?.validate(model.n_x(), model.n_z())?;
        let runs = self.runs()?;
        if runs.count == 0 {
            return Err(Error::Config("runs.count must be positive".into()));
        }
        check_len("runs.theta_init.mean", model.n_theta(), runs.theta_init.mean.len())?;
        check_len("runs.theta_init.std", model.n_theta(), runs.theta_init.std.len())?;
        check_len("runs.x0.low", model.n_x(), runs.x0.low.len())?;
        check_len("runs.x0.high", model.n_x(), runs.x0.high.len())?;
        if runs.x0.low.iter().zip(&runs.x0.high).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("runs.x0: every low must be <= high".into()));
        }
        if runs.theta_init.std.iter().any(|s| !(*s >= 0.0)) || !(runs.x0_init_std >= 0.0) {
            return Err(Error::Config("runs: standard deviations must be >= 0".into()));
        }
        if let Some(g) = &self.data()?.generate {
            check_len("data.generate.true_theta", model.n_theta(), g.true_theta.len())?;
            if let Some(x0) = &g.true_x0 {
                check_len("data.generate.true_x0", model.n_x(), x0.len())?;
            }
        }
        Ok(model)
    }
}

/// Data, true initial state (if known) and initial estimates of one run.
struct RunSetup {
    traj: Trajectory,
    vartheta0: Vector,
    x0_init: Vector,
}

fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

fn generate_for_run(model: &ModelSpec, g: &GenerateBlock, true_x0: Vector, seed: u64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let inputs: Vec<Vector> = (0..=g.horizon)
        .map(|_| Vector::from_fn(model.n_u(), |_, _| g.input_std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let cfg = DataGenConfig {
        true_theta: Vector::from_vec(g.true_theta.clone()),
        true_x0,
        noise_std_u: g.noise_std_u,
        noise_std_z: g.noise_std_z,
        unmodeled: None,
        seed,
    };
    generate_data(model, &cfg, &inputs)
}

fn setup_run(cfg: &ExperimentConfig, model: &ModelSpec, loaded: Option<&Trajectory>, seed: u64) -> Result<RunSetup> {
    let runs = cfg.runs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled_x0 = runs.x0.sample(&mut rng);
    let theta0 = Vector::from_fn(model.n_theta(), |i, _| {
        runs.theta_init.mean[i] + runs.theta_init.std[i] * rng.sample::<f64, _>(StandardNormal)
    });
    let vartheta0 = model.vartheta(&theta0, &Vector::zeros(model.n_omega()))?;
    let (traj, x0_init) = match (loaded, &cfg.data()?.generate) {
        (Some(traj), _) => (traj.clone(), sampled_x0),
        (None, Some(g)) => {
            let true_x0 = g.true_x0.as_ref().map_or(sampled_x0, |x| Vector::from_vec(x.clone()));
            let init = true_x0.map(|x| x + runs.x0_init_std * rng.sample::<f64, _>(StandardNormal));
            (generate_for_run(model, g, true_x0, seed, &mut rng)?, init)
        }
        (None, None) => unreachable!("data block validated"),
    };
    Ok(RunSetup { traj, vartheta0, x0_init })
}

fn load_data(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Option<Trajectory>> {
    match &cfg.data()?.path {
        Some(path) => {
            let path = cfg.resolve(path);
            let file = fs::File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let traj = Trajectory::read_csv(file).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            traj.check_model(model)?;
            Ok(Some(traj))
        }
        None => Ok(None),
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Final state of one restart.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub result: Identification,
}

impl RunSummary {
    pub fn converged(&self) -> bool {
        self.result.status.converged()
    }

    pub fn exploded(&self) -> bool {
        self.result.exploded()
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{value}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn stability_json(cfg: &ExperimentConfig, summary: &RunSummary) -> Result<String> {
    let parse = |r: &crate::monitor::StabilityReport| -> Result<serde_json::Value> {
        Ok(serde_json::from_str(&r.to_json(cfg.monitor_series)?)?)
    };
    let doc = serde_json::json!({
        "run": summary.run,
        "seed": summary.seed,
        "status": summary.result.status,
        "exploded": summary.exploded(),
        "final": parse(&summary.result.report)?,
        "first_explosion": summary.result.explosion_report.as_ref().map(parse).transpose()?,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Runs every restart of the config and writes per-run logs, stability reports,
/// `summary.csv` and `aggregate.csv` into `output_dir`.
pub fn run_identify(cfg: &ExperimentConfig, output_dir: &Path) -> Result<Vec<RunSummary>> {
    use rayon::prelude::*;

    let model = cfg.validate_identify()?;
    let loss = cfg.loss.build(model.n_z())?;
    let loaded = load_data(cfg, &model)?;
    let runs = cfg.runs()?;
    let opts = cfg.grad_options();
    fs::create_dir_all(output_dir)?;

    let one = |run: usize| -> Result<RunSummary> {
        let seed = run_seed(runs.seed, run);
        let setup = setup_run(cfg, &model, loaded.as_ref(), seed)?;
        let result = identify(&model, &loss, &setup.traj, &setup.vartheta0, &setup.x0_init, &cfg.optimizer, &opts)?;
        let summary = RunSummary { run, seed, result };
        let mut log = Vec::new();
        write_logs(&summary.result.logs, model.n_vartheta(), model.n_x(), &mut log)?;
        write_atomic(&output_dir.join(format!("run_{run:03}_log.csv")), &log)?;
        write_atomic(
            &output_dir.join(format!("run_{run:03}_stability.json")),
            stability_json(cfg, &summary)?.as_bytes(),
        )?;
        Ok(summary)
    };
    let summaries = thread_pool()?.install(|| (0..runs.count).into_par_iter().map(one).collect::<Result<Vec<_>>>())?;

    let mut buf = Vec::new();
    write_summary(&summaries, model.n_vartheta(), &mut buf)?;
    write_atomic(&output_dir.join("summary.csv"), &buf)?;
    let mut buf = Vec::new();
    write_aggregate(&summaries, model.n_vartheta(), &mut buf)?;
    write_atomic(&output_dir.join("aggregate.csv"), &buf)?;
    Ok(summaries)
}

pub fn summary_header(n_vartheta: usize) -> Vec<String> {
    let mut h = vec!["run".to_string(), "seed".into()];
    h.extend((1..=n_vartheta).map(|i| format!("theta_final_{i}")));
    h.extend(["cost_final".into(), "converged".into(), "exploded".into()]);
    h
}

/// `run,seed,theta_final_1..,cost_final,converged,exploded`.
pub fn write_summary<W: std::io::Write>(summaries: &[RunSummary], n_vartheta: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(summary_header(n_vartheta))?;
    for s in summaries {
        let mut rec = vec![s.run.to_string(), s.seed.to_string()];
        rec.extend(s.result.vartheta.iter().map(f64::to_string));
        rec.extend([s.result.cost.to_string(), s.converged().to_string(), s.exploded().to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: usize,
    pub seed: u64,
    pub theta_final: Vec<f64>,
    pub cost_final: f64,
    pub converged: bool,
    pub exploded: bool,
}

pub fn read_summary<R: std::io::Read>(reader: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n = header.iter().filter(|h| h.starts_with("theta_final_")).count();
    if header != summary_header(n) {
        return Err(Error::Data(format!("unexpected summary header {header:?}")));
    }
    let bad = |what: &str, v: &str| Error::Data(format!("bad {what} `{v}` in summary"));
    let flag = |v: &str| match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad("flag", other)),
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(SummaryRow {
            run: rec[0].parse().map_err(|_| bad("run", &rec[0]))?,
            seed: rec[1].parse().map_err(|_| bad("seed", &rec[1]))?,
            theta_final: (2..2 + n)
                .map(|i| rec[i].parse().map_err(|_| bad("parameter", &rec[i])))
                .collect::<Result<_>>()?,
            cost_final: rec[2 + n].parse().map_err(|_| bad("cost", &rec[2 + n]))?,
            converged: flag(&rec[3 + n])?,
            exploded: flag(&rec[4 + n])?,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation across runs of cost and parameters per iteration, over
/// accepted iterates of the runs still active at that iteration:
/// `iter,runs,cost_mean,cost_std,theta_1_mean,theta_1_std,..`.
pub fn write_aggregate<W: std::io::Write>(summaries: &[RunSummary], n_vartheta: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iter".to_string(), "runs".into(), "cost_mean".into(), "cost_std".into()];
    for i in 1..=n_vartheta {
        header.push(format!("theta_{i}_mean"));
        header.push(format!("theta_{i}_std"));
    }
    w.write_record(&header)?;
    let accepted: Vec<Vec<_>> = summaries
        .iter()
        .map(|s| s.result.logs.iter().filter(|l| !l.explosion).collect())
        .collect();
    let last = accepted.iter().filter_map(|logs| logs.last().map(|l| l.iter)).max().unwrap_or(0);
    for iter in 0..=last {
        let at: Vec<_> = accepted
            .iter()
            .filter_map(|logs| logs.iter().find(|l| l.iter == iter))
            .collect();
        if at.is_empty() {
            continue;
        }
        let (cm, cs) = mean_std(&at.iter().map(|l| l.cost).collect::<Vec<_>>());
        let mut rec = vec![iter.to_string(), at.len().to_string(), cm.to_string(), cs.to_string()];
        for i in 0..n_vartheta {
            let (m, s) = mean_std(&at.iter().map(|l| l.vartheta[i]).collect::<Vec<_>>());
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one generated trajectory per run as `run_XXX_data.csv`.
pub fn run_gen_data(cfg: &ExperimentConfig, output_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = cfg.model.build()?;
    let data = cfg.data()?;
    let g = data
        .generate
        .as_ref()
        .ok_or_else(|| Error::Config("gen-data needs a `data.generate` block".into()))?;
    check_len("data.generate.true_theta", model.n_theta(), g.true_theta.len())?;
    let (count, base) = cfg.runs.as_ref().map_or((1, 0), |r| (r.count, r.seed));
    fs::create_dir_all(output_dir)?;
    let mut written = Vec::new();
    for run in 0..count {
        let seed = run_seed(base, run);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let true_x0 = match (&g.true_x0, &cfg.runs) {
            (Some(x), _) => Vector::from_vec(x.clone()),
            (None, Some(r)) => r.x0.sample(&mut rng),
            (None, None) => return Err(Error::Config("data.generate.true_x0 or runs.x0 is required".into())),
        };
        check_len("true initial state", model.n_x(), true_x0.len())?;
        let traj = generate_for_run(&model, g, true_x0, seed, &mut rng)?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        let path = output_dir.join(format!("run_{run:03}_data.csv"));
        write_atomic(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the benchmark block and writes `bench.csv` and `bench_summary.txt`.
pub fn run_bench(cfg: &ExperimentConfig, output_dir: &Path) -> Result<BenchTable> {
    let bench = cfg.bench.as_ref().ok_or_else(|| Error::Config("missing `bench` block".into()))?;
    bench.validate()?;
    let model = cfg.model.build()?;
    let table = scaling_benchmark(&model, bench)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_atomic(&output_dir.join("bench.csv"), &buf)?;
    write_atomic(&output_dir.join("bench_summary.txt"), table.summary().as_bytes())?;
    Ok(table)
}

/// Runs the oracle triangle and Jacobian checks over every configured model.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let block = cfg.gradcheck.clone().unwrap_or(GradcheckBlock {
        models: None,
        horizons: default_gradcheck_horizons(),
        points: default_points(),
        seed: 0,
        tolerances: Tolerances::default(),
        jacobian_fault: None,
    });
    let models = block.models.clone().unwrap_or_else(|| vec![cfg.model.clone()]);
    let mut report = GradcheckReport {
        jacobian_tol: block.tolerances.jacobian_tol,
        ..Default::default()
    };
    for (i, m) in models.iter().enumerate() {
        let model = m.build_with_fault(block.jacobian_fault.as_ref())?;
        let loss = cfg.loss.build(model.n_z())?;
        let part = gradcheck(&model, &loss, &block.horizons, block.points, &block.tolerances, run_seed(block.seed, i))?;
        report.comparisons.extend(part.comparisons);
        report.jacobians.extend(part.jacobians);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"{
        "model": {"name": "linear"},
        "data": {"generate": {"horizon": 5, "true_theta": [0.5], "true_x0": [1.0]}},
        "optimizer": {"step_size_vartheta": 0.05, "max_iters": 500, "estimate_x0": false},
        "runs": {"count": 3, "seed": 11, "theta_init": {"mean": [0.3], "std": [0.05]}, "x0": {"low": [1.0], "high": [1.0]}}
    }"#;

    #[test]
    fn parse_rejects_unknown_keys() {
        let err = ExperimentConfig::from_json(r#"{"model": {"name": "linear", "colour": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field `colour`"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"model": {"name": "linear"}, "extra": 1}"#).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn data_block_needs_exactly_one_source() {
        let mut cfg = ExperimentConfig::from_json(LINEAR).unwrap();
        assert!(cfg.validate_identify().is_ok());
        cfg.data.as_mut().unwrap().path = Some("x.csv".into());
        assert!(cfg.validate_identify().unwrap_err().to_string().contains("exactly one"));
        cfg.data = Some(DataBlock::default());
        assert!(cfg.validate_identify().is_err());
    }

    #[test]
    fn identify_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(LINEAR).unwrap();
        let runs = run_identify(&cfg, dir.path()).unwrap();
        assert_eq!(runs.len(), 3);
        for r in &runs {
            assert!(r.converged() || r.result.status == crate::optim::Status::MaxIterations);
            assert!((r.result.vartheta[0] - 0.5).abs() < 1e-4);
        }
        let summary = fs::read(dir.path().join("summary.csv")).unwrap();
        let rows = read_summary(summary.as_slice()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].seed, 12);
        assert_eq!(rows[2].theta_final[0], runs[2].result.vartheta[0]);
        assert!(dir.path().join("run_002_stability.json").exists());
        let log = fs::read(dir.path().join("run_000_log.csv")).unwrap();
        assert_eq!(crate::optim::read_logs(log.as_slice()).unwrap(), runs[0].result.logs);
        let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert!(agg.starts_with("iter,runs,cost_mean,cost_std,theta_1_mean,theta_1_std\n0,3,"));
    }

    #[test]
    fn gen_data_then_identify_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(LINEAR).unwrap();
        let files = run_gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let mut from_file = cfg.clone();
        from_file.data = Some(DataBlock {
            path: Some(files[0].clone()),
            generate: None,
        });
        let out = dir.path().join("out");
        let runs = run_identify(&from_file, &out).unwrap();
        assert!((runs[0].result.vartheta[0] - 0.5).abs() < 1e-4);

        from_file.data.as_mut().unwrap().path = Some(dir.path().join("missing.csv"));
        assert!(matches!(run_identify(&from_file, &out), Err(Error::Data(_))));
    }

    #[test]
    fn bench_requires_three_repeats() {
        let mut cfg = ExperimentConfig::from_json(r#"{"model": {"name": "euler"}, "bench": {"horizons": [10], "repeats": 1}}"#).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(run_bench(&cfg, dir.path()).is_err());
        cfg.bench.as_mut().unwrap().repeats = 3;
        cfg.bench.as_mut().unwrap().min_sample_seconds = 0.0;
        let table = run_bench(&cfg, dir.path()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(dir.path().join("bench_summary.txt").exists());
    }

    #[test]
    fn gradcheck_catches_injected_fault() {
        let cfg = ExperimentConfig::from_json(
            r#"{"model": {"name": "logistic"},
                "gradcheck": {"horizons": [3], "points": 2, "jacobian_fault": {"jacobian": "jac_f_x"}}}"#,
        )
        .unwrap();
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_jacobian().unwrap().1.name, "jac_f_x");
        assert!(report.summary().contains("FAIL logistic jac_f_x"));
    }
}
