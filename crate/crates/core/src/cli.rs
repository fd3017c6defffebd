//! The `distgp` batch driver.
//!
//! Each invocation runs one job described by a TOML config file. See
//! [`CONFIG_HELP`] for the keys.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::Matrix;
use crate::distla;
use crate::gp::{CovarianceSpec, FitResult, GpError, KrigeProblem, NelderMeadConfig, ProblemConfig};
use crate::grid::ObjectLayout;
use crate::transport::protocol::{Inputs, StoreValue};
use crate::transport::{run_socket_worker, Backend, Cluster, ClusterOptions, SocketConfig, Targets};

pub const CONFIG_HELP: &str = "\
CONFIG KEYS (flat TOML):
  workers      number of worker processes P, a triangular number (default 1)
  backend      \"in-process\" (default) or \"socket\"
  h            replication factor of the observation dimension (default: smallest h with blocks <= 1000)
  h_pred       replication factor of the prediction dimension (default as for h)
  seed         master seed of the random streams (default 0)
  kernel       sqexp | matern | matern-nugget | matern-product-nugget | white
  theta        parameter vector, e.g. [1.0, 0.5, 0.1]
  nu           Matern smoothness: 0.5 (default), 1.5 or 2.5
  mean         constant mean (default 0)
  data         observations CSV: input columns, then y; optional columns noise and group
  grid         prediction locations CSV: the same input columns, nothing else
  output       output file (defaults: fit.json, predict.csv, simulate.csv, bench.csv)
  event_log    if set, per-block operation log written to this file
  se_fit       predict: also write standard errors (default true)
  r            simulate: number of realizations (default 1)
  post         simulate: condition on the data (default true)
  max_evals    fit: objective evaluation budget (default 2000)
  tol          fit: simplex size tolerance on log theta (default 1e-6)
  bench_n      bench-chol: matrix orders, e.g. [1024, 2048]
  bench_workers  bench-chol: worker counts (default [1, 3, 6])
  bench_h      bench-chol: replication factors (default [1, 2, 3])
  bench_residual  bench-chol: compute the factorization residual (default true)

Relative paths are resolved against the directory of the config file.

EXIT CODES:
  0 success, 1 other failure, 2 configuration error,
  3 covariance not positive definite (theta is echoed),
  4 worker lost or backend unavailable";

#[derive(Debug, Parser)]
#[command(name = "distgp", version, about = "Distributed Gaussian-process kriging", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, clap::Args)]
pub struct JobArgs {
    /// Job configuration file.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the `output` key.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Print the log-likelihood at theta.
    Loglik(JobArgs),
    /// Maximize the likelihood from theta; writes JSON.
    Fit(JobArgs),
    /// Predict at the grid locations; writes mean (and se) CSV.
    Predict(JobArgs),
    /// Draw realizations; writes one column per draw.
    Simulate(JobArgs),
    /// Time the distributed Cholesky over a sweep of (n, P, h).
    BenchChol(JobArgs),
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        master: String,
        #[arg(long)]
        rank: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub backend: BackendKind,
    pub h: Option<usize>,
    pub h_pred: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub kernel: Option<String>,
    pub theta: Option<Vec<f64>>,
    pub nu: Option<f64>,
    pub mean: Option<f64>,
    pub data: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    #[serde(default = "yes")]
    pub se_fit: bool,
    #[serde(default = "one")]
    pub r: usize,
    #[serde(default = "yes")]
    pub post: bool,
    pub max_evals: Option<usize>,
    pub tol: Option<f64>,
    #[serde(default)]
    pub bench_n: Vec<usize>,
    #[serde(default = "default_bench_workers")]
    pub bench_workers: Vec<usize>,
    #[serde(default = "default_bench_h")]
    pub bench_h: Vec<usize>,
    #[serde(default = "yes")]
    pub bench_residual: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_bench_workers() -> Vec<usize> {
    vec![1, 3, 6]
}

fn default_bench_h() -> Vec<usize> {
    vec![1, 2, 3]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    InProcess,
    Socket,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Gp(#[from] GpError),
    #[error("{0}")]
    Cluster(#[from] crate::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Gp(GpError::NotPositiveDefinite { .. }) => 3,
            CliError::Gp(GpError::InvalidParameters(_) | GpError::UnknownKernel(_) | GpError::UnsupportedSmoothness(_)) => 2,
            CliError::Gp(GpError::Cluster(e)) | CliError::Cluster(e) => cluster_exit_code(e),
            _ => 1,
        }
    }
}

fn cluster_exit_code(e: &crate::Error) -> i32 {
    match e {
        crate::Error::WorkerLost { .. } | crate::Error::BackendUnavailable(_) => 4,
        crate::Error::Grid(_) => 2,
        e if e.is_not_positive_definite() => 3,
        _ => 1,
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses arguments, runs the job and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (args, command) = match cli.command {
        Cmd::Worker { master, rank } => return run_socket_worker(&master, rank).map_err(CliError::from),
        Cmd::Loglik(a) => (a, "loglik"),
        Cmd::Fit(a) => (a, "fit"),
        Cmd::Predict(a) => (a, "predict"),
        Cmd::Simulate(a) => (a, "simulate"),
        Cmd::BenchChol(a) => (a, "bench-chol"),
    };
    let job = Job::load(&args)?;
    match command {
        "loglik" => job.loglik(),
        "fit" => job.fit(),
        "predict" => job.predict(),
        "simulate" => job.simulate(),
        _ => job.bench(),
    }
}

/// Observations read from the data CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub input_names: Vec<String>,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub noise: Option<Vec<f64>>,
    pub group: Option<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| config_err(format!("{} line {}: {e}", path.display(), k + 2)))?;
        rows.push(row);
    }
    Ok((headers, rows))
}

pub fn read_data(path: &Path) -> Result<DataSet, CliError> {
    let (headers, rows) = read_table(path)?;
    let find = |name: &str| headers.iter().position(|h| h == name);
    let yi = find("y").ok_or_else(|| config_err(format!("{}: no `y` column", path.display())))?;
    let (ni, gi) = (find("noise"), find("group"));
    let inputs: Vec<usize> = (0..headers.len()).filter(|&c| c != yi && Some(c) != ni && Some(c) != gi).collect();
    if rows.is_empty() {
        return Err(config_err(format!("{}: no observations", path.display())));
    }
    let column = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
    Ok(DataSet {
        input_names: inputs.iter().map(|&c| headers[c].clone()).collect(),
        x: Matrix::from_fn(rows.len(), inputs.len(), |i, k| rows[i][inputs[k]]),
        y: column(yi),
        noise: ni.map(column),
        group: gi.map(column),
    })
}

pub fn read_grid(path: &Path, input_names: &[String]) -> Result<Matrix, CliError> {
    let (headers, rows) = read_table(path)?;
    if headers != input_names {
        return Err(config_err(format!(
            "{}: columns {headers:?} do not match the data inputs {input_names:?}",
            path.display()
        )));
    }
    Ok(Matrix::from_fn(rows.len(), headers.len(), |i, k| rows[i][k]))
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v}"))).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.to_owned(), source: e })
}

struct Job {
    config: JobConfig,
    base: PathBuf,
    output: Option<PathBuf>,
}

impl Job {
    fn load(args: &JobArgs) -> Result<Self, CliError> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| config_err(format!("cannot read {}: {e}", args.config.display())))?;
        let config: JobConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", args.config.display())))?;
        let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Job { config, base, output: args.output.clone() })
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base.join(p)
        }
    }

    fn output(&self, default: &str) -> PathBuf {
        match (&self.output, &self.config.output) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => self.path(o),
            (None, None) => self.path(Path::new(default)),
        }
    }

    fn cluster(&self, workers: usize) -> Result<Cluster, CliError> {
        let backend = match self.config.backend {
            BackendKind::InProcess => Backend::InProcess,
            BackendKind::Socket => Backend::Socket(SocketConfig::current_exe()?),
        };
        let opts = ClusterOptions::new(workers, self.config.seed)
            .backend(backend)
            .event_log(self.config.event_log.is_some());
        Ok(Cluster::spawn(opts)?)
    }

    fn theta(&self) -> Result<Vec<f64>, CliError> {
        self.config.theta.clone().ok_or_else(|| config_err("`theta` is required"))
    }

    /// Cluster plus problem, with the grid loaded when `with_grid`.
    fn problem(&self, with_grid: bool) -> Result<(Cluster, KrigeProblem), CliError> {
        let kernel = self.config.kernel.as_deref().ok_or_else(|| config_err("`kernel` is required"))?;
        let spec = CovarianceSpec::builtin(kernel)?;
        let theta = self.theta()?;
        if theta.len() != spec.n_params {
            return Err(config_err(format!("{kernel} takes {} parameters, theta has {}", spec.n_params, theta.len())));
        }
        if theta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(config_err("theta must be positive"));
        }
        if let Some(nu) = self.config.nu {
            crate::gp::Smoothness::from_nu(nu)?;
        }
        let data_path = self.config.data.as_deref().ok_or_else(|| config_err("`data` is required"))?;
        let data = read_data(&self.path(data_path))?;
        let mut inputs = Inputs::new()
            .with_array("x", data.x.clone())
            .with_scalar("nu", self.config.nu.unwrap_or(0.5))
            .with_scalar("mean", self.config.mean.unwrap_or(0.0));
        if let Some(v) = &data.noise {
            inputs = inputs.with_array("noise", Matrix::column_vector(v));
        }
        if let Some(g) = &data.group {
            inputs = inputs.with_array("group", Matrix::column_vector(g));
        }
        let mut m = 0;
        if with_grid {
            let grid_path = self.config.grid.as_deref().ok_or_else(|| config_err("`grid` is required"))?;
            let grid = read_grid(&self.path(grid_path), &data.input_names)?;
            if grid.rows() == 0 {
                return Err(config_err("the prediction grid is empty"));
            }
            m = grid.rows();
            inputs = inputs.with_array("x_pred", grid);
        }
        let mut cluster = self.cluster(self.config.workers)?;
        let cfg = ProblemConfig::new("job", spec, data.y, inputs)
            .predictions(m)
            .replication(self.config.h, self.config.h_pred);
        let problem = KrigeProblem::new(&mut cluster, cfg)?;
        Ok((cluster, problem))
    }

    fn finish(&self, cluster: &mut Cluster) -> Result<(), CliError> {
        if let Some(p) = &self.config.event_log {
            let path = self.path(p);
            let events = cluster.take_events()?;
            let text: String = events.iter().map(|e| format!("{e}\n")).collect();
            fs::write(&path, text).map_err(|e| CliError::Io { path, source: e })?;
        }
        cluster.shutdown()?;
        Ok(())
    }

    fn loglik(&self) -> Result<(), CliError> {
        let (mut cluster, mut problem) = self.problem(false)?;
        let l = problem.log_density(&mut cluster, &self.theta()?)?;
        println!("{l}");
        self.finish(&mut cluster)
    }

    fn fit(&self) -> Result<(), CliError> {
        let (mut cluster, mut problem) = self.problem(false)?;
        let mut nm = NelderMeadConfig::default();
        if let Some(e) = self.config.max_evals {
            nm.max_evals = e;
        }
        if let Some(t) = self.config.tol {
            nm.tol = t;
        }
        let fit: FitResult = problem.optimize_log_dens(&mut cluster, &self.theta()?, &nm)?;
        let out = self.output("fit.json");
        let json = serde_json::to_string_pretty(&fit).map_err(|e| CliError::Output(e.to_string()))?;
        fs::write(&out, json + "\n").map_err(|e| CliError::Io { path: out.clone(), source: e })?;
        info!("fit finished after {} evaluations ({:?})", fit.evaluations, fit.status);
        println!("{}", fit.loglik);
        self.finish(&mut cluster)
    }

    fn predict(&self) -> Result<(), CliError> {
        let (mut cluster, mut problem) = self.problem(true)?;
        problem.set_theta(&self.theta()?)?;
        let pred = problem.predict(&mut cluster, self.config.se_fit)?;
        let out = self.output("predict.csv");
        match &pred.se {
            Some(se) => write_csv(
                &out,
                &["mean".into(), "se".into()],
                pred.mean.iter().zip(se).map(|(m, s)| vec![*m, *s]),
            )?,
            None => write_csv(&out, &["mean".into()], pred.mean.iter().map(|m| vec![*m]))?,
        }
        self.finish(&mut cluster)
    }

    fn simulate(&self) -> Result<(), CliError> {
        if self.config.r == 0 {
            return Err(config_err("`r` must be positive"));
        }
        let (mut cluster, mut problem) = self.problem(self.config.post)?;
        problem.set_theta(&self.theta()?)?;
        let sims = problem.simulate_realizations(&mut cluster, self.config.r, self.config.post)?;
        let header: Vec<String> = (1..=sims.cols()).map(|k| format!("sim{k}")).collect();
        let out = self.output("simulate.csv");
        write_csv(&out, &header, (0..sims.rows()).map(|i| (0..sims.cols()).map(|c| sims[(i, c)]).collect()))?;
        self.finish(&mut cluster)
    }

    fn bench(&self) -> Result<(), CliError> {
        if self.config.bench_n.is_empty() {
            return Err(config_err("`bench_n` is required"));
        }
        let mut rows = Vec::new();
        for &n in &self.config.bench_n {
            for &p in &self.config.bench_workers {
                for &h in &self.config.bench_h {
                    let (secs, residual) = bench_cell(self, n, p, h)?;
                    info!("n={n} P={p} h={h}: {secs:.3} s, residual {residual:e}");
                    rows.push(vec![n as f64, p as f64, h as f64, secs, residual]);
                }
            }
        }
        let out = self.output("bench.csv");
        let header: Vec<String> = ["n", "P", "h", "seconds", "residual"].iter().map(|s| s.to_string()).collect();
        let io = |e: csv::Error| CliError::Output(format!("{}: {e}", out.display()));
        let mut w = csv::Writer::from_path(&out).map_err(io)?;
        w.write_record(&header).map_err(io)?;
        for r in rows {
            w.write_record([
                format!("{}", r[0] as usize),
                format!("{}", r[1] as usize),
                format!("{}", r[2] as usize),
                format!("{}", r[3]),
                format!("{}", r[4]),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io { path: out.clone(), source: e })
    }
}

/// The synthetic matrix of the benchmark: exponential covariance on an
/// evenly spaced 1-D grid plus a unit nugget.
fn bench_matrix_theta() -> [f64; 3] {
    [1.0, 0.1, 1.0]
}

fn bench_inputs(n: usize) -> Inputs {
    let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    Inputs::new().with_array("x", Matrix::column_vector(&x)).with_scalar("nu", 0.5)
}

/// Wall time of one distributed Cholesky and its relative residual
/// `||L L^T - C||_F / ||C||_F` (NaN when residual checks are disabled).
fn bench_cell(job: &Job, n: usize, p: usize, h: usize) -> Result<(f64, f64), CliError> {
    let mut cluster = job.cluster(p)?;
    let layout = ObjectLayout::triangular(distla::block_layout(&cluster, n, Some(h))?);
    let theta = bench_matrix_theta();
    cluster.push("bench.inputs", StoreValue::Inputs(bench_inputs(n)), &Targets::All)?;
    distla::construct_distributed(&mut cluster, "bench.C", layout, "matern-nugget:cov", &theta, Some("bench.inputs"))?;
    let c = if job.config.bench_residual { Some(distla::collect_triangular(&mut cluster, "bench.C")?) } else { None };
    let start = Instant::now();
    distla::distributed_cholesky(&mut cluster, "bench.C", "bench.L")?;
    let secs = start.elapsed().as_secs_f64();
    let residual = match c {
        Some(c) => {
            let l = distla::collect_triangular(&mut cluster, "bench.L")?;
            let full = c.symmetrize_lower();
            let diff = l.matmul(&l.transpose());
            let num = diff.as_slice().iter().zip(full.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            num / full.frobenius_norm()
        }
        None => f64::NAN,
    };
    cluster.shutdown()?;
    Ok((secs, residual))
}
