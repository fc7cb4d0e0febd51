//! End-to-end experiments: simulate, fit, diagnose and persist.
//!
//! Every run writes plain CSV/JSON files under one output directory and a
//! `manifest.json` listing each file with its SHA-256 digest. Outputs depend
//! only on the configuration, never on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diagnostics::{rate_fit_points, DependenceEstimate, QuadSpec, RateEstimate, QUAD_SIGMAS};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::oracle::{kl_projection, ProjectionOptions, ProjectionTarget, DEFAULT_TOL};
use crate::processes::{simulate, GpMode, ObservationStream, ProcessConfig, ProcessKind, ThetaLaw, TrueMixing};
use crate::recursion::{pr_fit, FitTrace, Stride, TraceSpec, Truth, WeightSchedule};
use crate::support::{normalize, uniform_density, GridSpec, MixingDensity, SupportGrid};

/// Iterations at which presets keep full density snapshots.
pub const PRESET_CHECKPOINTS: [usize; 5] = [100, 500, 1000, 2000, 5000];

/// Starting density of the recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartSpec {
    #[default]
    Uniform,
    /// Unnormalized masses, one per grid atom.
    Masses { masses: Vec<f64> },
}

impl StartSpec {
    pub fn build(&self, grid: &Arc<SupportGrid>) -> Result<MixingDensity> {
        match self {
            StartSpec::Uniform => uniform_density(grid),
            StartSpec::Masses { masses } => {
                if masses.len() != grid.len() {
                    return Err(Error::InvalidParameter(format!(
                        "start has {} masses for a grid of {} atoms",
                        masses.len(),
                        grid.len()
                    )));
                }
                normalize(masses, grid)
            }
        }
    }
}

fn default_quad_nodes() -> usize {
    400
}
fn default_covariate_slots() -> usize {
    8
}
fn default_oracle_iter() -> usize {
    5000
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}

/// Optional information-projection run against the process truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub grid: GridSpec,
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: usize,
    /// Number of evenly spaced observation times used for covariate kernels.
    #[serde(default = "default_covariate_slots")]
    pub covariate_slots: usize,
    #[serde(default = "default_oracle_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_schedule() -> WeightSchedule {
    WeightSchedule::Harmonic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub process: ProcessConfig,
    pub kernel: Kernel,
    pub grid: GridSpec,
    #[serde(default)]
    pub start: StartSpec,
    #[serde(default = "default_schedule")]
    pub schedule: WeightSchedule,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub stride: Stride,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    /// Window `(lo, hi)` for the pooled rate fit; chosen from `n` if absent.
    #[serde(default)]
    pub rate_window: Option<(usize, usize)>,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("experiment config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<Arc<SupportGrid>> {
        self.process.validate()?;
        let kernel = self.kernel.validated()?;
        let grid = self.grid.build()?;
        kernel.check_grid(&grid)?;
        self.schedule.clone().validated()?;
        self.start.build(&grid)?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("seeds must be distinct".into()));
        }
        if let Stride::Every(0) = self.stride {
            return Err(Error::InvalidParameter("stride must be positive".into()));
        }
        if let Some(o) = &self.oracle {
            kernel.check_grid(&*o.grid.build()?)?;
            if o.covariate_slots == 0 {
                return Err(Error::InvalidParameter("oracle needs at least one covariate slot".into()));
            }
        }
        Ok(grid)
    }

    fn default_window(&self) -> (usize, usize) {
        let n = self.process.n;
        self.rate_window.unwrap_or(((n / 100).max(100), n))
    }
}

/// One file in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileRecord>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&FileRecord> {
        self.files.iter().find(|f| f.path == path)
    }
}

/// Output directory that remembers what has been written to it.
struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Artifacts { root: root.to_path_buf() })
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<FileRecord> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(FileRecord {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        })
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<FileRecord> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn finish(&self, mut files: Vec<FileRecord>) -> Result<Manifest> {
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { files };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

/// Number formatting used in every CSV: shortest round-trip decimal, with
/// scientific notation for very small or very large magnitudes.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Stream CSV with header `i,t,x`.
pub fn stream_csv(stream: &ObservationStream) -> String {
    let mut out = String::from("i,t,x\n");
    let cov = stream.covariates();
    for (idx, &x) in stream.values().iter().enumerate() {
        let t = cov.map(|c| fmt_num(c[idx])).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", idx + 1, t, fmt_num(x));
    }
    out
}

/// Parses a stream CSV written by [`stream_csv`] (or any CSV with an `x`
/// column and optional `t` column).
pub fn parse_stream_csv(text: &str) -> Result<ObservationStream> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse("stream csv", "empty file"))?
        .split(',')
        .map(str::trim)
        .collect();
    let xi = header
        .iter()
        .position(|h| *h == "x")
        .ok_or_else(|| Error::parse("stream csv", "missing `x` column"))?;
    let ti = header.iter().position(|h| *h == "t");
    let mut values = Vec::new();
    let mut times = Vec::new();
    let mut any_t = false;
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let cell = |i: usize| cells.get(i).copied().unwrap_or("");
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse("stream csv", format!("row {}: {e} (`{s}`)", row + 2)))
        };
        values.push(num(cell(xi))?);
        if let Some(ti) = ti {
            let t = cell(ti);
            if !t.is_empty() {
                any_t = true;
                times.push(num(t)?);
            }
        }
    }
    if any_t && times.len() != values.len() {
        return Err(Error::parse("stream csv", "covariate column is only partly filled"));
    }
    ObservationStream::new(values, any_t.then_some(times))
}

/// Trace CSV with header `iter,w,mass_<atom>...,K_n,K_n_star,hellinger`.
pub fn trace_csv(trace: &FitTrace, grid: &SupportGrid) -> String {
    let mut out = String::from("iter,w");
    for &k in &trace.atoms {
        let _ = write!(out, ",mass_{}", grid.atom_label(k));
    }
    out.push_str(",K_n,K_n_star,hellinger\n");
    for r in 0..trace.len() {
        let _ = write!(out, "{},{}", trace.iters[r], fmt_num(trace.weights[r]));
        for m in &trace.masses[r] {
            let _ = write!(out, ",{}", fmt_num(*m));
        }
        let _ = writeln!(
            out,
            ",{},{},{}",
            fmt_opt(trace.kn[r]),
            fmt_opt(trace.kn_star[r]),
            fmt_opt(trace.hellinger[r])
        );
    }
    out
}

fn theta_header(grid: &SupportGrid) -> &'static str {
    if grid.dim() == 2 {
        "theta_1,theta_2"
    } else {
        "theta_1"
    }
}

fn theta_cells(atom: &[f64]) -> String {
    atom.iter().map(|&c| fmt_num(c)).collect::<Vec<_>>().join(",")
}

/// Density CSV with header `theta_1[,theta_2],mass,density`.
pub fn density_csv(f: &MixingDensity) -> String {
    let grid = f.grid();
    let mut out = format!("{},mass,density\n", theta_header(grid));
    for (k, (&m, &w)) in f.masses().iter().zip(grid.quad_weights()).enumerate() {
        let _ = writeln!(out, "{},{},{}", theta_cells(grid.atom(k)), fmt_num(m), fmt_num(m / w));
    }
    out
}

/// Plot-ready CSV: `n,theta_1[,theta_2],mass,density`, one block per
/// checkpoint.
pub fn plot_csv(grid: &SupportGrid, snapshots: &[(usize, Vec<f64>)]) -> String {
    let mut out = format!("n,{},mass,density\n", theta_header(grid));
    for (n, masses) in snapshots {
        for (k, (&m, &w)) in masses.iter().zip(grid.quad_weights()).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", n, theta_cells(grid.atom(k)), fmt_num(m), fmt_num(m / w));
        }
    }
    out
}

/// Dependence report with header `lag,chi2,stderr,rho_hat`; `rho_hat` is
/// repeated on every row.
pub fn dependence_csv(est: &DependenceEstimate) -> String {
    let rho = fmt_opt(est.rho_hat());
    let mut out = String::from("lag,chi2,stderr,rho_hat\n");
    for ((l, c), s) in est.lags.iter().zip(&est.chi2).zip(&est.stderr) {
        let _ = writeln!(out, "{},{},{},{}", l, fmt_num(*c), fmt_num(*s), rho);
    }
    out
}

/// Results of one seed, kept for summaries and reports.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub stream: ObservationStream,
    pub fitted: MixingDensity,
    pub trace: FitTrace,
}

/// Truth objects for a process on a grid.
pub fn truth_for(process: &ProcessConfig, kernel: &Kernel, grid: &Arc<SupportGrid>) -> Result<Truth> {
    let tm = process.true_mixing();
    let inside = tm.dim() == grid.dim()
        && tm
            .range()
            .iter()
            .zip(grid.bounds())
            .all(|(&(lo, hi), &(a, b))| lo >= a - 1e-12 && hi <= b + 1e-12);
    let mixing = if inside { Some(tm.on_grid(grid)?) } else { None };
    Ok(Truth {
        mixing,
        marginal: tm.marginal(kernel),
    })
}

fn seed_prefix(config: &ExperimentConfig, seed: u64) -> String {
    if config.seeds.len() == 1 {
        String::new()
    } else {
        format!("seed_{seed}/")
    }
}

fn stage<T>(name: &str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        seed,
        source: Box::new(e),
    })
}

fn run_seed(
    config: &ExperimentConfig,
    grid: &Arc<SupportGrid>,
    out: &Artifacts,
    prefix: &str,
    seed: u64,
) -> Result<(SeedResult, Vec<FileRecord>)> {
    let dir = format!("{prefix}{}", seed_prefix(config, seed));
    let mut files = Vec::new();
    let stream = stage("simulate", seed, simulate(&config.process, seed))?;
    files.push(stage("write", seed, out.write(&format!("{dir}stream.csv"), stream_csv(&stream).as_bytes()))?);

    let n = stream.len();
    let trace_spec = TraceSpec {
        stride: config.stride,
        checkpoints: config.checkpoints.iter().copied().filter(|&c| c >= 1 && c <= n).collect(),
        ..TraceSpec::for_grid_size(grid.len())
    };
    let f0 = stage("fit", seed, config.start.build(grid))?;
    let truth = stage("fit", seed, truth_for(&config.process, &config.kernel, grid))?;
    let (fitted, trace) = stage(
        "fit",
        seed,
        pr_fit(&stream, &f0, &config.schedule, &config.kernel, &trace_spec, &truth),
    )?;
    files.push(stage("write", seed, out.write(&format!("{dir}trace.csv"), trace_csv(&trace, grid).as_bytes()))?);
    files.push(stage("write", seed, out.write(&format!("{dir}density.csv"), density_csv(&fitted).as_bytes()))?);
    if !trace.snapshots.is_empty() {
        files.push(stage(
            "write",
            seed,
            out.write(&format!("{dir}plot.csv"), plot_csv(grid, &trace.snapshots).as_bytes()),
        )?);
    }
    Ok((
        SeedResult {
            seed,
            stream,
            fitted,
            trace,
        },
        files,
    ))
}

/// Aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub process: String,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub grid: String,
    pub mean_masses: Vec<f64>,
    pub sd_masses: Vec<f64>,
    pub rate: Option<RateEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_note: Option<String>,
}

fn summarize(config: &ExperimentConfig, grid: &SupportGrid, results: &[SeedResult]) -> Summary {
    let k = grid.len();
    let s = results.len() as f64;
    let mut mean = vec![0.0; k];
    for r in results {
        mean.iter_mut().zip(r.fitted.masses()).for_each(|(a, m)| *a += m / s);
    }
    let mut sd = vec![0.0; k];
    if results.len() > 1 {
        for r in results {
            sd.iter_mut()
                .zip(r.fitted.masses())
                .zip(&mean)
                .for_each(|((a, m), mu)| *a += (m - mu) * (m - mu) / (s - 1.0));
        }
        sd.iter_mut().for_each(|v| *v = v.sqrt());
    }
    let pooled: Vec<(usize, f64)> = results.iter().flat_map(|r| r.trace.kn_star_points()).collect();
    let (rate, rate_note) = if pooled.is_empty() {
        (None, Some("no marginal divergence recorded".to_string()))
    } else {
        match rate_fit_points(&pooled, config.default_window()) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Summary {
        process: config.process.kind.name().to_string(),
        n: config.process.n,
        seeds: config.seeds.clone(),
        grid: config.grid.0.clone(),
        mean_masses: mean,
        sd_masses: sd,
        rate,
        rate_note,
    }
}

/// Target density for the oracle: the true mixing law pushed through the
/// fitting kernel, at evenly spaced covariates for indexed kernels.
pub fn project_truth(config: &ExperimentConfig, spec: &OracleSpec) -> Result<crate::oracle::ProjectionResult> {
    let grid0 = spec.grid.build()?;
    let (atoms, masses) = config.process.true_mixing().listing();
    let kernel = config.kernel;
    let covariates: Vec<f64> = if kernel.is_covariate_indexed() {
        let times = observation_times(&config.process);
        let slots = spec.covariate_slots.min(times.len());
        (0..slots)
            .map(|j| times[((j as f64 + 0.5) * times.len() as f64 / slots as f64) as usize])
            .collect()
    } else {
        Vec::new()
    };
    let cov_iter: Vec<Option<f64>> = if covariates.is_empty() {
        vec![None]
    } else {
        covariates.iter().map(|&t| Some(t)).collect()
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in &cov_iter {
        for a in atoms.iter() {
            let loc = kernel.location(a, *t);
            lo = lo.min(loc);
            hi = hi.max(loc);
        }
    }
    let sd = kernel.sigma2().sqrt();
    let quad = QuadSpec::new(lo - QUAD_SIGMAS * sd, hi + QUAD_SIGMAS * sd, spec.quad_nodes)?;
    let options = ProjectionOptions {
        max_iter: spec.max_iter,
        tol: spec.tol,
        start: None,
    };
    let dens = |x: f64, t: Option<f64>| -> f64 {
        atoms
            .iter()
            .zip(&masses)
            .map(|(a, m)| m * kernel.eval_unchecked(x, a, t))
            .sum()
    };
    if covariates.is_empty() {
        let m = |x: f64| dens(x, None);
        kl_projection(&ProjectionTarget::Marginal(&m), &grid0, &kernel, &quad, &options)
    } else {
        let m = |x: f64, t: f64| dens(x, Some(t));
        let target = ProjectionTarget::Indexed {
            covariates: &covariates,
            density: &m,
        };
        kl_projection(&target, &grid0, &kernel, &quad, &options)
    }
}

fn observation_times(process: &ProcessConfig) -> Vec<f64> {
    match &process.kind {
        ProcessKind::GpDrift { times: Some(t), .. } => t.clone(),
        _ => (1..=process.n).map(|i| i as f64).collect(),
    }
}

/// Everything produced by one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub files: Vec<FileRecord>,
    pub results: Vec<SeedResult>,
    pub summary: Summary,
    pub projection: Option<crate::oracle::ProjectionResult>,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {threads} worker threads: {e}")))
}

fn run_into(config: &ExperimentConfig, out: &Artifacts, prefix: &str, workers: &rayon::ThreadPool) -> Result<ExperimentOutcome> {
    let grid = config.validate()?;
    let runs: Vec<Result<(SeedResult, Vec<FileRecord>)>> = workers.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(config, &grid, out, prefix, seed))
            .collect()
    });
    let mut files = Vec::new();
    let mut results = Vec::new();
    for run in runs {
        match run {
            Ok((r, f)) => {
                results.push(r);
                files.extend(f);
            }
            Err(e) => {
                let marker = format!("{prefix}.failed");
                out.write(&marker, format!("{e}\n").as_bytes())?;
                return Err(e);
            }
        }
    }
    let summary = summarize(config, &grid, &results);
    files.push(out.write_json(&format!("{prefix}summary.json"), &summary)?);
    let projection = match &config.oracle {
        Some(spec) => {
            let res = workers.install(|| project_truth(config, spec));
            let res = match res {
                Ok(r) => r,
                Err(e) => {
                    let e = Error::Stage {
                        stage: "oracle".into(),
                        seed: config.seeds[0],
                        source: Box::new(e),
                    };
                    out.write(&format!("{prefix}.failed"), format!("{e}\n").as_bytes())?;
                    return Err(e);
                }
            };
            files.push(out.write_json(&format!("{prefix}projection.json"), &res.report())?);
            Some(res)
        }
        None => None,
    };
    Ok(ExperimentOutcome {
        files,
        results,
        summary,
        projection,
    })
}

/// Runs `config` for every seed (in parallel on `threads` workers), writes
/// all outputs under `out_dir`, and returns the manifest.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<(Manifest, ExperimentOutcome)> {
    let out = Artifacts::new(out_dir)?;
    let outcome = run_into(config, &out, "", &pool(threads)?)?;
    let manifest = out.finish(outcome.files.clone())?;
    Ok((manifest, outcome))
}

/// Identifiers accepted by [`reproduce`].
pub const EXAMPLE_IDS: [&str; 7] = ["ex1", "ex2", "ex3", "ex4a", "ex4b", "ex4b_misspec", "ma_q"];

/// Overrides applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub n: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub schedule: Option<WeightSchedule>,
    pub grid: Option<GridSpec>,
    pub kernel: Option<Kernel>,
}

fn preset_checkpoints(n: usize) -> Vec<usize> {
    PRESET_CHECKPOINTS.iter().copied().filter(|&c| c <= n).collect()
}

fn base(process: ProcessConfig, kernel: Kernel, grid: &str, start: StartSpec) -> ExperimentConfig {
    let n = process.n;
    ExperimentConfig {
        process,
        kernel,
        grid: GridSpec(grid.to_string()),
        start,
        schedule: WeightSchedule::Harmonic,
        seeds: vec![1],
        stride: Stride::Default,
        checkpoints: preset_checkpoints(n),
        rate_window: None,
        oracle: None,
    }
}

fn gaussian(sigma2: f64) -> Kernel {
    Kernel::GaussianLocation { sigma2 }
}

fn gp(n: usize, gp_mean: f64, mode: GpMode) -> ProcessConfig {
    ProcessConfig {
        n,
        kind: ProcessKind::GpDrift {
            gp_mean,
            amplitude: 0.1,
            length_scale2: 10.0,
            bernoulli_p: 0.3,
            mode,
            times: None,
        },
    }
}

/// Named sub-runs of a preset, before overrides.
pub fn preset(id: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let runs = match id {
        "ex1" => [0.3, 0.7, 0.99, 0.999]
            .iter()
            .map(|&r| {
                let process = ProcessConfig {
                    n: 5000,
                    kind: ProcessKind::Ar1Mixture { p: 0.3, r, mu2: 2.5 },
                };
                (
                    format!("r_{r}"),
                    base(
                        process,
                        gaussian(1.0),
                        "atoms:0,2.5",
                        StartSpec::Masses { masses: vec![0.7, 0.3] },
                    ),
                )
            })
            .collect(),
        "ex2" => {
            let process = ProcessConfig {
                n: 2000,
                kind: ProcessKind::MeanMixtureAr1 {
                    theta_law: ThetaLaw::TruncNormal {
                        mu: 0.0,
                        sigma2: 1.0,
                        lo: -3.0,
                        hi: 3.0,
                    },
                    r: 0.7,
                },
            };
            vec![("fit".into(), base(process, gaussian(1.0), "-3:3:200", StartSpec::Uniform))]
        }
        "ex3" => {
            let law = ThetaLaw::Mixture {
                components: vec![
                    (0.5, ThetaLaw::PointMass { at: 0.0 }),
                    (
                        0.5,
                        ThetaLaw::TruncNormal {
                            mu: 4.0,
                            sigma2: 1.0,
                            lo: -8.0,
                            hi: 8.0,
                        },
                    ),
                ],
            };
            let process = ProcessConfig {
                n: 5000,
                kind: ProcessKind::MeanMixtureAr1 { theta_law: law, r: 0.7 },
            };
            vec![("fit".into(), base(process, gaussian(1.0), "-8:8:200", StartSpec::Uniform))]
        }
        "ex4a" => {
            let process = gp(1000, -1.0, GpMode::TwoPointShift { shift: 3.0 });
            vec![
                (
                    "known_support".into(),
                    base(process.clone(), gaussian(0.1), "atoms:-1,2", StartSpec::Uniform),
                ),
                ("continuous".into(), base(process, gaussian(0.1), "-3:3:200", StartSpec::Uniform)),
            ]
        }
        "ex4b" | "ex4b_misspec" => {
            let process = gp(
                1000,
                0.0,
                GpMode::LinearDrift {
                    alpha: 5.0,
                    beta: 2.0,
                    time_scale: 100.0,
                },
            );
            let kernel = Kernel::LinearDriftGaussian {
                sigma2: 0.1,
                time_scale: 100.0,
            };
            let mut cfg = if id == "ex4b" {
                base(process, kernel, "-6:6:200,-6:6:200", StartSpec::Uniform)
            } else {
                base(process, kernel, "-3:3:200,-6:6:200", StartSpec::Uniform)
            };
            if id == "ex4b_misspec" {
                cfg.oracle = Some(OracleSpec {
                    grid: GridSpec("-3:3:31,-6:6:61".into()),
                    quad_nodes: default_quad_nodes(),
                    covariate_slots: default_covariate_slots(),
                    max_iter: 1000,
                    tol: DEFAULT_TOL,
                });
            }
            vec![("fit".into(), cfg)]
        }
        "ma_q" => {
            let process = ProcessConfig {
                n: 5000,
                kind: ProcessKind::MaQ {
                    q: 3,
                    psi: vec![0.6, 0.3],
                    p: 0.3,
                    mu2: 2.5,
                },
            };
            vec![("fit".into(), base(process, gaussian(1.0), "atoms:0,2.5", StartSpec::Uniform))]
        }
        other => {
            return Err(Error::UnknownExample {
                given: other.to_string(),
                valid: EXAMPLE_IDS.join(", "),
            })
        }
    };
    Ok(runs)
}

fn apply(mut cfg: ExperimentConfig, o: &Overrides) -> ExperimentConfig {
    if let Some(n) = o.n {
        cfg.process.n = n;
        if let ProcessKind::GpDrift { times, .. } = &mut cfg.process.kind {
            *times = None;
        }
        cfg.checkpoints = preset_checkpoints(n);
    }
    if let Some(s) = &o.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(s) = &o.schedule {
        cfg.schedule = s.clone();
    }
    if let Some(g) = &o.grid {
        if let StartSpec::Masses { .. } = cfg.start {
            cfg.start = StartSpec::Uniform;
        }
        cfg.grid = g.clone();
    }
    if let Some(k) = o.kernel {
        cfg.kernel = k;
    }
    cfg
}

/// Local maxima of a 1D profile whose height is at least `rel` times the
/// global maximum, ordered by height.
pub fn modes(profile: &[(f64, f64)], rel: f64) -> Vec<f64> {
    let top = profile.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut found: Vec<(f64, f64)> = Vec::new();
    for j in 0..profile.len() {
        let v = profile[j].1;
        let left = if j == 0 { f64::NEG_INFINITY } else { profile[j - 1].1 };
        let right = profile.get(j + 1).map_or(f64::NEG_INFINITY, |p| p.1);
        if v >= left && v > right && v >= rel * top && v > 0.0 {
            found.push(profile[j]);
        }
    }
    found.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite masses"));
    found.into_iter().map(|p| p.0).collect()
}

fn mean_over_seeds(results: &[SeedResult], f: impl Fn(&MixingDensity) -> f64) -> f64 {
    results.iter().map(|r| f(&r.fitted)).sum::<f64>() / results.len() as f64
}

fn nearest_mass(f: &MixingDensity, point: &[f64]) -> f64 {
    f.mass(f.grid().nearest(point))
}

fn sample_autocorr(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let cov: f64 = xs.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum();
    cov / var
}

fn axis_profile(f: &MixingDensity, d: usize) -> Vec<(f64, f64)> {
    f.axis_marginal(d).unwrap_or_else(|| {
        f.grid()
            .atoms()
            .map(|a| a[d])
            .zip(f.masses().iter().copied())
            .collect()
    })
}

fn report_for(id: &str, runs: &[(String, ExperimentOutcome)]) -> Value {
    let first = &runs[0].1.results;
    match id {
        "ex1" => {
            let rows: Vec<Value> = runs
                .iter()
                .map(|(name, o)| {
                    let m0 = mean_over_seeds(&o.results, |f| nearest_mass(f, &[0.0]));
                    json!({"run": name, "mass_at_0": m0, "abs_error": (m0 - 0.3).abs(), "target": 0.3})
                })
                .collect();
            json!({"example": id, "runs": rows})
        }
        "ex2" => {
            let f = &first[0].fitted;
            let last = first[0].trace.len() - 1;
            json!({
                "example": id,
                "modes": modes(&axis_profile(f, 0), 0.1),
                "mass_in_minus1_1": mean_over_seeds(first, |f| f.mass_where(|t| t[0].abs() <= 1.0)),
                "truth_mass_in_minus1_1": 0.6827 / 0.9973,
                "k_n_final": first[0].trace.kn[last],
                "k_n_star_final": first[0].trace.kn_star[last],
                "hellinger_final": first[0].trace.hellinger[last],
            })
        }
        "ex3" => {
            let f = &first[0].fitted;
            let second: Vec<f64> = modes(&axis_profile(f, 0), 0.0)
                .into_iter()
                .filter(|m| (2.5..=5.5).contains(m))
                .collect();
            json!({
                "example": id,
                "mass_near_zero": mean_over_seeds(first, |f| f.mass_where(|t| t[0] > -0.5 && t[0] < 0.5)),
                "target_mass_near_zero": 0.45,
                "mass_in_minus1_1": mean_over_seeds(first, |f| f.mass_where(|t| t[0] > -1.0 && t[0] < 1.0)),
                "second_mode": second.first(),
                "modes": modes(&axis_profile(f, 0), 0.05),
            })
        }
        "ex4a" => {
            let known = mean_over_seeds(first, |f| nearest_mass(f, &[-1.0]));
            let cont = runs.get(1).map(|(_, o)| {
                let f = &o.results[0].fitted;
                json!({
                    "modes": modes(&axis_profile(f, 0), 0.1),
                    "mass_near_minus1": f.mass_where(|t| (t[0] + 1.0).abs() <= 0.5),
                    "mass_near_2": f.mass_where(|t| (t[0] - 2.0).abs() <= 0.5),
                })
            });
            json!({"example": id, "mass_at_minus1": known, "target": 0.7, "continuous": cont})
        }
        "ex4b" | "ex4b_misspec" => {
            let f = &first[0].fitted;
            let mut report = json!({
                "example": id,
                "intercept_modes": modes(&axis_profile(f, 0), 0.1),
                "slope_modes": modes(&axis_profile(f, 1), 0.1),
            });
            if let Some(p) = &runs[0].1.projection {
                report["projection"] = json!({
                    "k_tilde": p.k_tilde,
                    "converged": p.converged,
                    "iterations": p.iterations,
                    "intercept_modes": modes(&axis_profile(&p.f_tilde, 0), 0.1),
                });
            }
            report
        }
        "ma_q" => {
            let xs = first[0].stream.values();
            json!({
                "example": id,
                "mass_at_0": mean_over_seeds(first, |f| nearest_mass(f, &[0.0])),
                "target": 0.3,
                "autocorrelation": (1..=5).map(|h| sample_autocorr(xs, h)).collect::<Vec<_>>(),
            })
        }
        _ => Value::Null,
    }
}

/// Result of a preset run.
#[derive(Debug, Clone)]
pub struct Reproduction {
    pub manifest: Manifest,
    pub report: Value,
    pub runs: Vec<(String, ExperimentOutcome)>,
}

/// Runs a preset with overrides, writing each sub-run under its own
/// directory plus `report.json` and a top-level manifest.
pub fn reproduce(id: &str, overrides: &Overrides, out_dir: &Path, threads: usize) -> Result<Reproduction> {
    let configs: Vec<(String, ExperimentConfig)> = preset(id)?
        .into_iter()
        .map(|(name, cfg)| (name, apply(cfg, overrides)))
        .collect();
    for (_, cfg) in &configs {
        cfg.validate()?;
    }
    let out = Artifacts::new(out_dir)?;
    let workers = pool(threads)?;
    let outcomes: Vec<Result<(Vec<FileRecord>, ExperimentOutcome)>> = workers.install(|| {
        configs
            .par_iter()
            .map(|(name, cfg)| {
                let prefix = format!("{name}/");
                let config_file = out.write_json(&format!("{prefix}config.json"), cfg)?;
                Ok((vec![config_file], run_into(cfg, &out, &prefix, &workers)?))
            })
            .collect()
    });
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for ((name, _), outcome) in configs.into_iter().zip(outcomes) {
        let (config_files, outcome) = outcome?;
        files.extend(config_files);
        files.extend(outcome.files.iter().cloned());
        runs.push((name, outcome));
    }
    let report = report_for(id, &runs);
    files.push(out.write_json("report.json", &report)?);
    let manifest = out.finish(files)?;
    Ok(Reproduction { manifest, report, runs })
}

/// Reads a manifest written by [`run_experiment`] or [`reproduce`].
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a stream and its metadata sidecar.
pub fn write_stream(stream: &ObservationStream, dir: &Path, stem: &str) -> Result<Vec<FileRecord>> {
    let out = Artifacts::new(dir)?;
    let mut files = vec![out.write(&format!("{stem}.csv"), stream_csv(stream).as_bytes())?];
    if let Some(meta) = &stream.meta {
        files.push(out.write_json(&format!("{stem}.meta.json"), meta)?);
    }
    Ok(files)
}

/// Writes a fitted density and trace.
pub fn write_fit(fitted: &MixingDensity, trace: &FitTrace, dir: &Path) -> Result<Vec<FileRecord>> {
    let out = Artifacts::new(dir)?;
    let mut files = vec![
        out.write("density.csv", density_csv(fitted).as_bytes())?,
        out.write("trace.csv", trace_csv(trace, fitted.grid()).as_bytes())?,
    ];
    if !trace.snapshots.is_empty() {
        files.push(out.write("plot.csv", plot_csv(fitted.grid(), &trace.snapshots).as_bytes())?);
    }
    Ok(files)
}

/// Writes a single named file and returns its record.
pub fn write_text(dir: &Path, rel: &str, text: &str) -> Result<FileRecord> {
    Artifacts::new(dir)?.write(rel, text.as_bytes())
}

/// Writes JSON pretty-printed with a trailing newline.
pub fn write_json_file<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<FileRecord> {
    Artifacts::new(dir)?.write_json(rel, value)
}

/// Truth listing used in reports, keyed by atom label.
pub fn truth_listing(truth: &TrueMixing) -> BTreeMap<String, f64> {
    let (atoms, masses) = truth.listing();
    atoms
        .iter()
        .zip(masses)
        .map(|(a, m)| (a.iter().map(|c| format!("{c}")).collect::<Vec<_>>().join("_"), m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig {
            process: ProcessConfig {
                n: 100,
                kind: ProcessKind::Ar1Mixture { p: 0.3, r: 0.0, mu2: 2.5 },
            },
            kernel: gaussian(1.0),
            grid: GridSpec("atoms:0,2.5".into()),
            start: StartSpec::Uniform,
            schedule: WeightSchedule::Harmonic,
            seeds: vec![3],
            stride: Stride::Default,
            checkpoints: vec![],
            rate_window: None,
            oracle: None,
        }
    }

    #[test]
    fn minimal_run_writes_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, outcome) = run_experiment(&minimal(), dir.path(), 1).unwrap();
        let names: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["density.csv", "stream.csv", "summary.json", "trace.csv"]);
        for f in &manifest.files {
            let bytes = fs::read(dir.path().join(&f.path)).unwrap();
            assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256);
        }
        assert_eq!(outcome.results.len(), 1);
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn reruns_are_byte_identical_across_thread_counts() {
        let mut cfg = minimal();
        cfg.seeds = vec![1, 2, 3, 4];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, _) = run_experiment(&cfg, a.path(), 1).unwrap();
        let (mb, _) = run_experiment(&cfg, b.path(), 4).unwrap();
        assert_eq!(ma, mb);
        assert!(ma.get("seed_2/trace.csv").is_some());
    }

    #[test]
    fn stream_csv_round_trip() {
        let s = ObservationStream::new(vec![0.5, -1e-7, 3.25], Some(vec![1.0, 2.0, 4.0])).unwrap();
        let back = parse_stream_csv(&stream_csv(&s)).unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(back.covariates(), s.covariates());
        let plain = ObservationStream::from_values(vec![1.0, 2.0]).unwrap();
        assert_eq!(stream_csv(&plain), "i,t,x\n1,,1\n2,,2\n");
        assert!(parse_stream_csv(&stream_csv(&plain)).unwrap().covariates().is_none());
        assert!(parse_stream_csv("i,t\n1,2\n").is_err());
    }

    #[test]
    fn trace_and_density_headers() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&minimal(), dir.path(), 1).unwrap();
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace.starts_with("iter,w,mass_0,mass_2.5,K_n,K_n_star,hellinger\n"));
        let density = fs::read_to_string(dir.path().join("density.csv")).unwrap();
        assert!(density.starts_with("theta_1,mass,density\n"));
    }

    #[test]
    fn failures_leave_a_marker() {
        let mut cfg = minimal();
        cfg.kernel = gaussian(1e-6);
        cfg.grid = GridSpec("atoms:100".into());
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, dir.path(), 1).unwrap_err();
        match &err {
            Error::Stage { stage, seed, source } => {
                assert_eq!(stage, "fit");
                assert_eq!(*seed, 3);
                assert!(matches!(**source, Error::Step { index: 1, .. }));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.is_numeric());
        assert!(dir.path().join(".failed").exists());
        assert!(dir.path().join("stream.csv").exists());
    }

    #[test]
    fn config_validation() {
        let mut cfg = minimal();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = minimal();
        cfg.start = StartSpec::Masses { masses: vec![1.0] };
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&minimal()).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), minimal());
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn unknown_preset_lists_ids() {
        let err = preset("ex9").unwrap_err().to_string();
        for id in EXAMPLE_IDS {
            assert!(err.contains(id));
        }
        for id in EXAMPLE_IDS {
            for (_, cfg) in preset(id).unwrap() {
                cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn mode_finder() {
        let prof: Vec<(f64, f64)> = vec![(0.0, 0.1), (1.0, 0.5), (2.0, 0.2), (3.0, 0.3), (4.0, 0.01)];
        assert_eq!(modes(&prof, 0.1), vec![1.0, 3.0]);
        assert_eq!(modes(&prof, 0.7), vec![1.0]);
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.0, 1.0, -2.5, 1e-300, 3.3e-7, 123456.789, 1e20] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_num(1e-300), "1e-300");
    }
}
