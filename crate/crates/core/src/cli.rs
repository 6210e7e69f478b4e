//! Batch experiment runner behind the `rmt-equiv` binary.
//!
//! Every run writes `manifest.json` (status `running`) before producing any
//! CSV, then rewrites it with status `complete` or `failed`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::concentration::convex_concentration_experiment;
use crate::cplx_diag::SolveOptions;
use crate::error::{Error, ErrorKind, Result};
use crate::linalg::C64;
use crate::model::{load_model, DataModel, ModelFamily};
use crate::regression::{empirical_regression_stats, predict_stats, Nonlinearity, PredictOptions};
use crate::resolvent::{density_options, spectral_density, stieltjes_sweep, Evaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Spectral density on a grid.
    Spectrum,
    /// Deterministic equivalent (Stieltjes values and Λ) at given z.
    Equivalent,
    /// Frobenius error of the equivalent against sample means, per size.
    Rate,
    /// Fluctuations of (1/p)·tr(Q) for bounded-entry data.
    Concentration,
    /// Monte-Carlo statistics of the regression fixed point.
    Regression,
    /// Predicted statistics of the regression fixed point.
    Predict,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Equivalent => "equivalent",
            Command::Rate => "rate",
            Command::Concentration => "concentration",
            Command::Regression => "regression",
            Command::Predict => "predict",
        }
    }
}

/// Scalar map of the regression: `logistic` (uses `lambda`), `zero`,
/// `identity`, `constant:<c>` or `tanh:<a>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NonlinearitySpec(pub String);

impl NonlinearitySpec {
    pub fn build(&self, lambda: f64) -> Result<Nonlinearity> {
        let s = self.0.trim();
        let arg = |rest: &str| {
            rest.parse::<f64>()
                .map_err(|_| Error::Config(format!("nonlinearity `{s}`: bad number `{rest}`")))
        };
        match s {
            "logistic" => {
                if !(lambda > 0.0) {
                    return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
                }
                Ok(Nonlinearity::logistic(lambda))
            }
            "zero" => Ok(Nonlinearity::zero()),
            "identity" => Ok(Nonlinearity::identity()),
            _ => {
                if let Some(rest) = s.strip_prefix("constant:") {
                    Ok(Nonlinearity::constant(arg(rest)?))
                } else if let Some(rest) = s.strip_prefix("tanh:") {
                    Ok(Nonlinearity::tanh(arg(rest)?))
                } else {
                    Err(Error::Config(format!("unknown nonlinearity `{s}`")))
                }
            }
        }
    }
}

/// A fully resolved run description. Serialized into the manifest, and
/// hashed to identify the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub model_path: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub output_path: PathBuf,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Params {
    pub z: Vec<[f64; 2]>,
    pub grid: (f64, f64, usize),
    pub eta: f64,
    pub sizes: Vec<(usize, usize)>,
    pub trials: usize,
    pub lambda: f64,
    pub tol: f64,
    pub nodes: usize,
    pub nonlinearity: NonlinearitySpec,
    pub family: ModelFamily,
}

/// Config file contents. Every field is optional; flags win over the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub z: Option<Vec<[f64; 2]>>,
    pub grid: Option<(f64, f64, usize)>,
    pub eta: Option<f64>,
    pub sizes: Option<Vec<(usize, usize)>>,
    pub trials: Option<usize>,
    pub lambda: Option<f64>,
    pub tol: Option<f64>,
    pub nodes: Option<usize>,
    pub nonlinearity: Option<NonlinearitySpec>,
    pub family: Option<ModelFamily>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
}

#[derive(Debug, Parser)]
#[command(name = "rmt-equiv", version, about = "Deterministic equivalents and concentration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    Spectrum(Flags),
    Equivalent(Flags),
    Rate(Flags),
    Concentration(Flags),
    Regression(Flags),
    Predict(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Complex point `re,im`; repeatable.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_complex)]
    pub z: Vec<[f64; 2]>,
    /// `lo,hi,steps`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    pub grid: Option<(f64, f64, usize)>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// `n:p,n:p,...`.
    #[arg(long, value_parser = parse_sizes)]
    pub sizes: Option<SizeList>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// `logistic`, `zero`, `identity`, `constant:<c>` or `tanh:<a>`.
    #[arg(long)]
    pub nonlinearity: Option<String>,
}

fn parse_complex(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `re,im`, got `{s}`"));
    }
    let re = parts[0].trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[0]))?;
    let im = parts[1].trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[1]))?;
    Ok([re, im])
}

fn parse_grid(s: &str) -> std::result::Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected `lo,hi,steps`, got `{s}`"));
    }
    let lo = parts[0].parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[0]))?;
    let hi = parts[1].parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[1]))?;
    let steps = parts[2].parse::<usize>().map_err(|e| format!("`{}`: {e}", parts[2]))?;
    Ok((lo, hi, steps))
}

/// `(n, p)` pairs given as one flag value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeList(pub Vec<(usize, usize)>);

fn parse_sizes(s: &str) -> std::result::Result<SizeList, String> {
    s.split(',')
        .map(|item| {
            let (n, p) = item
                .split_once(':')
                .ok_or_else(|| format!("expected `n:p`, got `{item}`"))?;
            let n = n.trim().parse::<usize>().map_err(|e| format!("`{n}`: {e}"))?;
            let p = p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))?;
            Ok((n, p))
        })
        .collect::<std::result::Result<_, _>>()
        .map(SizeList)
}

fn default_sizes(command: Command) -> Vec<(usize, usize)> {
    match command {
        Command::Concentration => vec![(200, 100), (800, 400)],
        _ => vec![(100, 50), (200, 100), (400, 200)],
    }
}

fn default_trials(command: Command) -> usize {
    match command {
        Command::Concentration | Command::Regression => 500,
        _ => 200,
    }
}

/// Merges flags, config file and defaults (in that order of precedence).
pub fn resolve(command: Command, flags: &Flags) -> Result<ExperimentConfig> {
    let file = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => ConfigFile::default(),
    };
    let z = if !flags.z.is_empty() {
        flags.z.clone()
    } else {
        file.z.unwrap_or_else(|| vec![[-1.0, 0.0]])
    };
    let params = Params {
        z,
        grid: flags.grid.or(file.grid).unwrap_or((0.0, 2.0, 400)),
        eta: flags.eta.or(file.eta).unwrap_or(1e-3),
        sizes: flags.sizes.clone().map(|s| s.0).or(file.sizes).unwrap_or_else(|| default_sizes(command)),
        trials: flags.trials.or(file.trials).unwrap_or_else(|| default_trials(command)),
        lambda: flags.lambda.or(file.lambda).unwrap_or(5.0),
        tol: flags.tol.or(file.tol).unwrap_or(1e-10),
        nodes: flags.nodes.or(file.nodes).unwrap_or(64),
        nonlinearity: flags
            .nonlinearity
            .clone()
            .map(NonlinearitySpec)
            .or(file.nonlinearity)
            .unwrap_or_else(|| NonlinearitySpec("logistic".into())),
        family: file.family.unwrap_or(ModelFamily::TwoGroup { a: 0.2, b: 0.4, epsilon: 0.03 }),
    };
    let config = ExperimentConfig {
        command,
        model_path: flags.model.clone().or(file.model),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        threads: flags.threads.or(file.threads).unwrap_or(0),
        output_path: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(".")),
        params,
    };
    check_ranges(&config)?;
    Ok(config)
}

fn check_ranges(c: &ExperimentConfig) -> Result<()> {
    let p = &c.params;
    let bad = |field: &str, why: String| Err(Error::Config(format!("`{field}` {why}")));
    if p.z.iter().any(|z| !z[0].is_finite() || !z[1].is_finite()) {
        return bad("z", "must be finite".into());
    }
    let (lo, hi, steps) = p.grid;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps < 2 {
        return bad("grid", format!("needs lo < hi and steps >= 2, got {lo},{hi},{steps}"));
    }
    if !(p.eta > 0.0 && p.eta.is_finite()) {
        return bad("eta", format!("must be positive, got {}", p.eta));
    }
    if p.sizes.is_empty() || p.sizes.iter().any(|&(n, q)| n == 0 || q == 0) {
        return bad("sizes", "must be a non-empty list of positive n:p".into());
    }
    if p.trials == 0 {
        return bad("trials", "must be at least 1".into());
    }
    if !(p.tol > 0.0 && p.tol < 1.0) {
        return bad("tol", format!("must lie in (0, 1), got {}", p.tol));
    }
    if p.nodes < 2 {
        return bad("nodes", format!("must be at least 2, got {}", p.nodes));
    }
    if !(p.lambda > 0.0 && p.lambda.is_finite()) {
        return bad("lambda", format!("must be positive, got {}", p.lambda));
    }
    match c.command {
        Command::Spectrum | Command::Equivalent | Command::Regression | Command::Predict if c.model_path.is_none() => {
            bad("model", format!("is required by `{}`", c.command.name()))
        }
        Command::Rate if p.trials < 2 => bad("trials", "must be at least 2 for `rate`".into()),
        Command::Concentration if p.trials < 2 => bad("trials", "must be at least 2 for `concentration`".into()),
        Command::Concentration if p.sizes.iter().any(|&(n, q)| n != 2 * q) => {
            bad("sizes", "must satisfy n = 2p for `concentration`".into())
        }
        _ => Ok(()),
    }
}

/// A CSV table in memory: header plus formatted rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&'static str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn int(v: usize) -> String {
    v.to_string()
}

/// Tables plus manifest extras produced by one command.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub discard_rates: Vec<f64>,
    pub extra: serde_json::Map<String, Value>,
}

fn load(c: &ExperimentConfig) -> Result<DataModel> {
    let path = c
        .model_path
        .as_ref()
        .ok_or_else(|| Error::Config("`model` is required".into()))?;
    load_model(path)
}

fn solve_options(c: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        tol: c.params.tol,
        ..Default::default()
    }
}

fn z_values(c: &ExperimentConfig) -> Vec<C64> {
    c.params.z.iter().map(|z| C64::new(z[0], z[1])).collect()
}

fn stieltjes_table(model: &DataModel, zs: &[C64], opts: &SolveOptions) -> Result<Table> {
    let mut t = Table::new("stieltjes", &["re_z", "im_z", "re_m", "im_m", "iterations", "residual"]);
    for pt in stieltjes_sweep(model, zs, opts)? {
        t.push(vec![
            real(pt.z.re),
            real(pt.z.im),
            real(pt.m.re),
            real(pt.m.im),
            int(pt.iterations),
            real(pt.residual),
        ]);
    }
    Ok(t)
}

fn stats_tables(m_y: &nalgebra::DVector<f64>, c_y: &nalgebra::DMatrix<f64>, prefix: &str) -> Vec<Table> {
    let mut mean = Table::new(&format!("{prefix}_mean"), &["index", "m_y"]);
    for (i, v) in m_y.iter().enumerate() {
        mean.push(vec![int(i), real(*v)]);
    }
    let mut cov = Table::new(&format!("{prefix}_cov"), &["row", "col", "c_y"]);
    for i in 0..c_y.nrows() {
        for j in 0..c_y.ncols() {
            cov.push(vec![int(i), int(j), real(c_y[(i, j)])]);
        }
    }
    vec![mean, cov]
}

/// Runs the numerical part of a command without touching the filesystem.
pub fn execute(c: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let p = &c.params;
    match c.command {
        Command::Spectrum => {
            let model = load(c)?;
            let (lo, hi, steps) = p.grid;
            let grid: Vec<f64> = (0..steps)
                .map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64)
                .collect();
            let opts = SolveOptions {
                tol: p.tol,
                ..density_options()
            };
            let mut t = Table::new("spectrum", &["x", "density"]);
            for (x, d) in spectral_density(&model, &grid, p.eta, &opts)? {
                t.push(vec![real(x), real(d)]);
            }
            out.tables.push(t);
            out.extra.insert("model_id".into(), json!(format!("{:016x}", model.id())));
        }
        Command::Equivalent => {
            let model = load(c)?;
            let zs = z_values(c);
            let opts = solve_options(c);
            out.tables.push(stieltjes_table(&model, &zs, &opts)?);
            let ev = Evaluator::new(&model);
            let mut lam = Table::new("lambda", &["re_z", "im_z", "index", "re_lambda", "im_lambda"]);
            for z in &zs {
                let (l, _) = ev.compute_lambda(*z, &opts)?;
                for (i, v) in l.entries().iter().enumerate() {
                    lam.push(vec![real(z.re), real(z.im), int(i), real(v.re), real(v.im)]);
                }
            }
            out.tables.push(lam);
            out.extra.insert("model_id".into(), json!(format!("{:016x}", model.id())));
        }
        Command::Rate => {
            let z = z_values(c)[0];
            let table = crate::concentration::frobenius_rate_experiment(&p.family, z, &p.sizes, p.trials, c.seed)?;
            let mut t = Table::new("rate", &["n", "p", "trials", "used", "discard_rate", "error", "rate"]);
            for r in &table.rows {
                t.push(vec![
                    int(r.n),
                    int(r.p),
                    int(r.trials),
                    int(r.used),
                    real(r.discard_rate),
                    real(r.error),
                    real(r.rate),
                ]);
                out.discard_rates.push(r.discard_rate);
            }
            out.tables.push(t);
            out.extra.insert("slope".into(), json!(table.slope));
        }
        Command::Concentration => {
            let ps: Vec<usize> = p.sizes.iter().map(|s| s.1).collect();
            let rows = convex_concentration_experiment(&ps, p.trials, c.seed, 1.0)?;
            let mut t = Table::new("concentration", &["p", "n", "used", "discard_rate", "std", "flagged"]);
            for r in &rows {
                t.push(vec![int(r.p), int(r.n), int(r.used), real(r.discard_rate), real(r.std), r.flagged.to_string()]);
                out.discard_rates.push(r.discard_rate);
            }
            out.tables.push(t);
        }
        Command::Regression => {
            let model = load(c)?;
            let f = p.nonlinearity.build(p.lambda)?;
            let stats = empirical_regression_stats(&model, &f, p.trials, c.seed)?;
            out.discard_rates.push(stats.discard_rate());
            out.extra.insert("flagged".into(), json!(stats.flagged()));
            out.tables.extend(stats_tables(&stats.mean, &stats.cov, "empirical"));
        }
        Command::Predict => {
            let model = load(c)?;
            let f = p.nonlinearity.build(p.lambda)?;
            let opts = PredictOptions {
                tol: p.tol,
                nodes: p.nodes,
                ..Default::default()
            };
            let stats = predict_stats(&model, &f, &opts)?;
            let mut g = Table::new("data", &["index", "mu", "nu", "delta"]);
            for k in 0..stats.mu.len() {
                g.push(vec![int(k), real(stats.mu[k]), real(stats.nu[k]), real(stats.delta[k])]);
            }
            out.tables.push(g);
            out.tables.extend(stats_tables(&stats.m_y, &stats.c_y, "predicted"));
            out.extra
                .insert("outer_iterations".into(), json!(stats.diagnostics.outer_iterations));
        }
    }
    Ok(out)
}

/// SHA-256 of the canonical JSON form of the resolved config.
pub fn config_hash(c: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(c).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

struct Manifest {
    path: PathBuf,
    body: serde_json::Map<String, Value>,
}

impl Manifest {
    fn start(c: &ExperimentConfig) -> Result<Self> {
        let mut body = serde_json::Map::new();
        body.insert("status".into(), json!("running"));
        body.insert("command".into(), json!(c.command.name()));
        body.insert("config".into(), serde_json::to_value(c).expect("config serializes"));
        body.insert("config_hash".into(), json!(config_hash(c)));
        body.insert(
            "versions".into(),
            json!({ "rmt-equiv": env!("CARGO_PKG_VERSION"), "manifest": 1 }),
        );
        let m = Self {
            path: c.output_path.join("manifest.json"),
            body,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&Value::Object(self.body.clone())).expect("json");
        write_atomic(&self.path, &(text + "\n"))
    }

    fn set(&mut self, key: &str, v: Value) {
        self.body.insert(key.into(), v);
    }
}

/// Runs a resolved config: manifest, CSVs, final manifest.
pub fn run(c: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&c.output_path).map_err(|e| Error::Io(format!("{}: {e}", c.output_path.display())))?;
    let started = Instant::now();
    let mut manifest = Manifest::start(c)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let result = pool.install(|| execute(c));
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            manifest.set("status", json!("failed"));
            manifest.set("error", json!(e.to_string()));
            manifest.set("wall_time_s", json!(started.elapsed().as_secs_f64()));
            manifest.write()?;
            return Err(e);
        }
    };
    let mut files = Vec::new();
    for t in &outcome.tables {
        let path = c.output_path.join(format!("{}.csv", t.name));
        write_atomic(&path, &t.to_csv())?;
        files.push(path);
    }
    manifest.set("status", json!("complete"));
    manifest.set(
        "files",
        json!(outcome
            .tables
            .iter()
            .map(|t| format!("{}.csv", t.name))
            .collect::<Vec<_>>()),
    );
    manifest.set("discard_rates", json!(outcome.discard_rates));
    for (k, v) in outcome.extra {
        manifest.set(&k, v);
    }
    manifest.set("wall_time_s", json!(started.elapsed().as_secs_f64()));
    manifest.write()?;
    Ok(files)
}

/// Exit code for an error: 1 for input/config/model/io, 2 for numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Input | ErrorKind::Io => 1,
        ErrorKind::Numerical => 2,
    }
}

/// Entry point of the binary: parses `args`, runs, returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, flags) = match cli.command {
        Sub::Spectrum(f) => (Command::Spectrum, f),
        Sub::Equivalent(f) => (Command::Equivalent, f),
        Sub::Rate(f) => (Command::Rate, f),
        Sub::Concentration(f) => (Command::Concentration, f),
        Sub::Regression(f) => (Command::Regression, f),
        Sub::Predict(f) => (Command::Predict, f),
    };
    let result = resolve(command, &flags).and_then(|c| run(&c));
    match result {
        Ok(files) => {
            let mut msg = String::new();
            for f in files {
                let _ = writeln!(msg, "wrote {}", f.display());
            }
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { iterations, residual } = &e {
                eprintln!("diagnostics: {iterations} iterations, last residual {residual:e}");
            }
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flag_values() {
        assert_eq!(parse_complex("-1.5,0.25").unwrap(), [-1.5, 0.25]);
        assert!(parse_complex("1").is_err());
        assert_eq!(parse_grid("-1,2,10").unwrap(), (-1.0, 2.0, 10));
        assert_eq!(parse_sizes("100:50,200:100").unwrap().0, vec![(100, 50), (200, 100)]);
        assert!(parse_sizes("100x50").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"seed": 7, "trials": 30, "eta": 0.01}"#).unwrap();
        let flags = Flags {
            config: Some(cfg),
            seed: Some(9),
            ..Default::default()
        };
        let c = resolve(Command::Rate, &flags).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.params.trials, 30);
        assert_eq!(c.params.eta, 0.01);
        assert_eq!(c.params.nodes, 64);
    }

    #[test]
    fn config_errors_name_field_and_line() {
        let e = parse_config("{\n  \"seed\": 1,\n  \"bogus\": 2\n}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 3") && msg.contains("bogus"), "{msg}");
        let e = resolve(Command::Spectrum, &Flags::default()).unwrap_err();
        assert!(e.to_string().contains("model"));
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn nonlinearity_specs() {
        assert_eq!(NonlinearitySpec("zero".into()).build(1.0).unwrap().eval(3.0), 0.0);
        assert_eq!(NonlinearitySpec("constant:2.5".into()).build(1.0).unwrap().eval(3.0), 2.5);
        assert!(NonlinearitySpec("cubic".into()).build(1.0).is_err());
        let f = NonlinearitySpec("logistic".into()).build(5.0).unwrap();
        assert!((f.eval(0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn reals_have_17_significant_digits() {
        assert_eq!(real(0.1), "1.0000000000000001e-1");
        assert_eq!(real(-2.0), "-2.0000000000000000e0");
    }
}
