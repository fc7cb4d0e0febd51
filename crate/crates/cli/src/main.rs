use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixrec::diagnostics::{dependence_profile, rate_fit_points, MIN_MC_SIZE};
use mixrec::experiment::{
    self, parse_stream_csv, preset, project_truth, read_manifest, reproduce, run_experiment, write_fit, write_json_file, write_stream,
    write_text, ExperimentConfig, OracleSpec, Overrides,
};
use mixrec::oracle::npmle_em;
use mixrec::processes::ProcessConfig;
use mixrec::recursion::{TraceSpec, Truth};
use mixrec::support::GridSpec;
use mixrec::{pr_fit, simulate, Error, Kernel, WeightSchedule};

/// Predictive recursion for mixing densities from dependent data.
#[derive(Parser, Debug)]
#[command(name = "mixrec", version, about)]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "MIXREC_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a process and write `stream.csv` plus a metadata sidecar.
    Simulate(SimulateArgs),
    /// Fit a stream with the recursion.
    Fit(FitArgs),
    /// Dependence-decay estimate for a process, or a rate fit of a trace.
    Diagnose(DiagnoseArgs),
    /// Information projection of the process truth onto a grid, or an
    /// NPMLE fit of a stream.
    Oracle(OracleArgs),
    /// Run one of the example presets.
    Reproduce(ReproduceArgs),
    /// Run an experiment from a JSON configuration.
    Run(RunArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KernelKind {
    Gaussian,
    Drift,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleKind {
    Harmonic,
    Power,
}

/// Model flags shared by several subcommands; each overrides the config.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Support grid, e.g. `-3:3:200`, `-6:6:50,-6:6:50` or `atoms:0,2.5`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum)]
    kernel: Option<KernelKind>,
    /// Kernel variance.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Divisor of the time covariate for the drift kernel.
    #[arg(long)]
    time_scale: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleKind>,
    /// Exponent of the power schedule `c * i^-alpha`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Leading constant of the power schedule.
    #[arg(long)]
    c: Option<f64>,
}

impl ModelFlags {
    fn kernel(&self, base: Option<Kernel>) -> Result<Option<Kernel>, Error> {
        let kind = match (self.kernel, base) {
            (Some(k), _) => k,
            (None, Some(Kernel::GaussianLocation { .. })) => KernelKind::Gaussian,
            (None, Some(Kernel::LinearDriftGaussian { .. })) => KernelKind::Drift,
            (None, None) if self.sigma2.is_some() || self.time_scale.is_some() => KernelKind::Gaussian,
            (None, None) => return Ok(None),
        };
        let sigma2 = self.sigma2.or(base.map(|k| k.sigma2())).unwrap_or(1.0);
        let k = match kind {
            KernelKind::Gaussian => Kernel::gaussian(sigma2)?,
            KernelKind::Drift => {
                let ts = self
                    .time_scale
                    .or(match base {
                        Some(Kernel::LinearDriftGaussian { time_scale, .. }) => Some(time_scale),
                        _ => None,
                    })
                    .unwrap_or(100.0);
                Kernel::linear_drift(sigma2, ts)?
            }
        };
        Ok(Some(k))
    }

    fn schedule(&self, base: Option<&WeightSchedule>) -> Result<Option<WeightSchedule>, Error> {
        let kind = match (self.schedule, base) {
            (Some(s), _) => s,
            (None, Some(WeightSchedule::Power { .. })) if self.alpha.is_some() || self.c.is_some() => ScheduleKind::Power,
            (None, None) if self.alpha.is_some() => ScheduleKind::Power,
            _ => return Ok(None),
        };
        Ok(Some(match kind {
            ScheduleKind::Harmonic => WeightSchedule::Harmonic,
            ScheduleKind::Power => {
                let (a0, c0) = match base {
                    Some(WeightSchedule::Power { alpha, c }) => (*alpha, *c),
                    _ => (1.0, 0.99),
                };
                WeightSchedule::power(self.alpha.unwrap_or(a0), self.c.unwrap_or(c0))?
            }
        }))
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        if let Some(g) = &self.grid {
            cfg.grid = GridSpec(g.clone());
            if !matches!(cfg.start, experiment::StartSpec::Uniform) {
                cfg.start = experiment::StartSpec::Uniform;
            }
        }
        if let Some(k) = self.kernel(Some(cfg.kernel))? {
            cfg.kernel = k;
        }
        if let Some(s) = self.schedule(Some(&cfg.schedule))? {
            cfg.schedule = s;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Experiment configuration or bare process configuration (JSON).
    #[arg(long, conflicts_with = "example")]
    config: Option<PathBuf>,
    /// Use the process of a preset.
    #[arg(long)]
    example: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Stream CSV with an `x` column and optional `t` column.
    #[arg(long)]
    stream: PathBuf,
    /// Experiment configuration supplying grid, kernel, start and schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    /// Iterations at which to keep full density snapshots.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<usize>,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Experiment or process configuration for the dependence estimate.
    #[arg(long, conflicts_with = "example")]
    config: Option<PathBuf>,
    #[arg(long)]
    example: Option<String>,
    /// Largest lag.
    #[arg(long, default_value_t = 5)]
    lags: usize,
    #[arg(long, default_value_t = MIN_MC_SIZE)]
    mc_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trace CSV whose `K_n_star` column is fitted against `iter`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Rate-fit window `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    window: Option<Vec<usize>>,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Experiment configuration; the projection target is its process truth.
    #[arg(long)]
    config: Option<PathBuf>,
    /// NPMLE fit of this stream instead of a projection.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = mixrec::oracle::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    /// One of ex1, ex2, ex3, ex4a, ex4b, ex4b_misspec, ma_q.
    example: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value = "mixrec-out")]
    out: PathBuf,
}

/// Reads either a full experiment configuration or a bare process.
fn load_process(path: &Path) -> Result<ProcessConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if let Ok(cfg) = ExperimentConfig::from_json(&text) {
        return Ok(cfg.process);
    }
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn preset_process(id: &str) -> Result<ProcessConfig, Error> {
    Ok(preset(id)?.remove(0).1.process)
}

fn process_from(config: &Option<PathBuf>, example: &Option<String>) -> Result<ProcessConfig, Error> {
    match (config, example) {
        (Some(p), _) => load_process(p),
        (None, Some(id)) => preset_process(id),
        (None, None) => Err(Error::InvalidParameter("pass --config or --example".into())),
    }
}

fn read_stream(path: &Path) -> Result<mixrec::ObservationStream, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_stream_csv(&text)
}

fn print_files(files: &[experiment::FileRecord], root: &Path) {
    for f in files {
        println!("{}  {}", f.sha256, root.join(&f.path).display());
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let mut process = process_from(&a.config, &a.example)?;
    if let Some(n) = a.n {
        process.n = n;
        if let mixrec::ProcessKind::GpDrift { times, .. } = &mut process.kind {
            *times = None;
        }
    }
    let stream = simulate(&process, a.seed)?;
    let files = write_stream(&stream, &a.out, "stream")?;
    print_files(&files, &a.out);
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<(), Error> {
    let stream = read_stream(&a.stream)?;
    let base = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let grid_spec = a
        .model
        .grid
        .clone()
        .or(base.as_ref().map(|c| c.grid.0.clone()))
        .ok_or_else(|| Error::InvalidParameter("pass --grid or --config".into()))?;
    let grid = GridSpec(grid_spec.clone()).build()?;
    let kernel = match a.model.kernel(base.as_ref().map(|c| c.kernel))? {
        Some(k) => k,
        None => Kernel::gaussian(1.0)?,
    };
    let schedule = a
        .model
        .schedule(base.as_ref().map(|c| &c.schedule))?
        .or(base.as_ref().map(|c| c.schedule.clone()))
        .unwrap_or(WeightSchedule::Harmonic);
    let start = match &base {
        Some(c) if a.model.grid.is_none() => c.start.clone(),
        _ => experiment::StartSpec::Uniform,
    };
    let f0 = start.build(&grid)?;
    let truth = match &base {
        Some(c) => experiment::truth_for(&c.process, &kernel, &grid)?,
        None => Truth::default(),
    };
    let spec = TraceSpec {
        checkpoints: a.checkpoints.clone(),
        ..TraceSpec::for_grid_size(grid.len())
    };
    let (fitted, trace) = pr_fit(&stream, &f0, &schedule, &kernel, &spec, &truth)?;
    let files = write_fit(&fitted, &trace, &a.out)?;
    print_files(&files, &a.out);
    Ok(())
}

/// `(iter, K_n_star)` pairs from a trace CSV.
fn read_trace_points(path: &Path) -> Result<Vec<(usize, f64)>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let bad = |msg: String| Error::Parse {
        what: path.display().to_string(),
        msg,
    };
    let it = header.iter().position(|h| *h == "iter").ok_or_else(|| bad("missing `iter` column".into()))?;
    let kt = header
        .iter()
        .position(|h| *h == "K_n_star")
        .ok_or_else(|| bad("missing `K_n_star` column".into()))?;
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        let k = cells.get(kt).copied().unwrap_or("");
        if k.is_empty() {
            continue;
        }
        let i = cells[it].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        out.push((i, k.parse::<f64>().map_err(|e| bad(e.to_string()))?));
    }
    Ok(out)
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<(), Error> {
    let mut files = Vec::new();
    if let Some(trace) = &a.trace {
        let points = read_trace_points(trace)?;
        let last = points.last().map(|p| p.0).unwrap_or(0);
        let window = match &a.window {
            Some(w) => (w[0], w[1]),
            None => ((last / 100).max(100), last),
        };
        let rate = rate_fit_points(&points, window)?;
        println!("slope {:.6}  r2 {:.4}  points {}", rate.gamma_slope, rate.r2, rate.points);
        files.push(write_json_file(&a.out, "rate.json", &rate)?);
    }
    if a.config.is_some() || a.example.is_some() {
        let process = process_from(&a.config, &a.example)?;
        let lags: Vec<usize> = (1..=a.lags.max(1)).collect();
        let est = dependence_profile(&process, &lags, a.mc_size, a.seed)?;
        for ((l, c), s) in est.lags.iter().zip(&est.chi2).zip(&est.stderr) {
            println!("lag {l}: chi2 {c:.6} (se {s:.2e})");
        }
        if let Some(r) = est.rho_hat() {
            println!("rho_hat {r:.4}");
        }
        files.push(write_text(&a.out, "dependence.csv", &experiment::dependence_csv(&est))?);
    }
    if files.is_empty() {
        return Err(Error::InvalidParameter("pass --trace, --config or --example".into()));
    }
    print_files(&files, &a.out);
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<(), Error> {
    if let Some(stream_path) = &a.stream {
        let stream = read_stream(stream_path)?;
        let base = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
        let grid_spec = a
            .model
            .grid
            .clone()
            .or(base.as_ref().map(|c| c.grid.0.clone()))
            .ok_or_else(|| Error::InvalidParameter("pass --grid or --config".into()))?;
        let grid = GridSpec(grid_spec).build()?;
        let kernel = a
            .model
            .kernel(base.as_ref().map(|c| c.kernel))?
            .unwrap_or(Kernel::gaussian(1.0)?);
        let (fitted, ll) = npmle_em(&stream, &grid, &kernel, a.max_iter, a.tol)?;
        println!("mean log-likelihood {ll:.6}");
        let files = vec![write_text(&a.out, "npmle_density.csv", &experiment::density_csv(&fitted))?];
        print_files(&files, &a.out);
        return Ok(());
    }
    let path = a
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("pass --config (projection) or --stream (NPMLE)".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(k) = a.model.kernel(Some(cfg.kernel))? {
        cfg.kernel = k;
    }
    let mut spec = cfg.oracle.clone().unwrap_or(OracleSpec {
        grid: cfg.grid.clone(),
        quad_nodes: 2000,
        covariate_slots: 8,
        max_iter: a.max_iter,
        tol: a.tol,
    });
    if let Some(g) = &a.model.grid {
        spec.grid = GridSpec(g.clone());
    }
    spec.max_iter = a.max_iter;
    spec.tol = a.tol;
    let p = project_truth(&cfg, &spec)?;
    println!("k_tilde {:.6e}  iterations {}  converged {}", p.k_tilde, p.iterations, p.converged);
    let files = vec![write_json_file(&a.out, "projection.json", &p.report())?];
    print_files(&files, &a.out);
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs, threads: usize) -> Result<(), Error> {
    let first = preset(&a.example)?.remove(0).1;
    let overrides = Overrides {
        n: a.n,
        seeds: a.seeds.clone().or(a.seed.map(|s| vec![s])),
        schedule: a.model.schedule(Some(&first.schedule))?,
        grid: a.model.grid.clone().map(GridSpec),
        kernel: a.model.kernel(None)?.filter(|_| a.model.kernel.is_some() || a.model.sigma2.is_some()),
    };
    let rep = reproduce(&a.example, &overrides, &a.out, threads)?;
    println!("{}", serde_json::to_string_pretty(&rep.report).unwrap_or_default());
    println!("{} files written to {}", rep.manifest.files.len(), a.out.display());
    Ok(())
}

fn cmd_run(a: RunArgs, threads: usize) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    a.model.apply(&mut cfg)?;
    let (manifest, _) = run_experiment(&cfg, &a.out, threads)?;
    print_files(&manifest.files, &a.out);
    let check = read_manifest(&a.out)?;
    debug_assert_eq!(check, manifest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Reproduce(a) => cmd_reproduce(a, threads),
        Command::Run(a) => cmd_run(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
