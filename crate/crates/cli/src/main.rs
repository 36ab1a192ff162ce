mod manifest;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmed::causal::{bootstrap, BootstrapConfig};
use gmed::components::{select_components, DEFAULT_DFD_THRESHOLD};
use gmed::data::{load_dataset, write_dataset, ConstraintKind, ConstraintMatrix, LoadOptions};
use gmed::likelihood::FitData;
use gmed::optimizer::OptimizerConfig;
use gmed::simulate::{
    generate_dataset, metrics_csv, replication_study, MethodConfig, SimulationDesign,
};
use gmed::GmedError;
use serde::{Deserialize, Serialize};

use manifest::ManifestBuilder;
use report::{BootstrapOut, StudyResult, TruthOut};

#[derive(Parser)]
#[command(
    name = "gmed",
    version,
    about = "Causal mediation with a covariance-graph mediator"
)]
struct Cli {
    /// Worker threads (falls back to GMED_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate mediation components from a dataset.
    Fit(FitArgs),
    /// Bootstrap the causal estimands of a previous fit.
    Bootstrap(BootstrapArgs),
    /// Write a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Run a replication study and write a metrics table.
    Replicate(ReplicateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HChoice {
    Pooled,
    Identity,
}

impl From<HChoice> for ConstraintKind {
    fn from(h: HChoice) -> Self {
        match h {
            HChoice::Pooled => ConstraintKind::PooledCovariance,
            HChoice::Identity => ConstraintKind::Identity,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
struct OptimizerArgs {
    /// Random starts in addition to the pooled-covariance eigenvectors.
    #[arg(long, default_value_t = 10)]
    starts: usize,
    /// Skip the pooled-covariance eigenvector starts.
    #[arg(long)]
    no_eigen_starts: bool,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Relative objective tolerance of the outer loop.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

impl OptimizerArgs {
    fn config(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            max_outer_iter: self.max_iter,
            tol_obj: self.tol,
            n_random_starts: self.starts,
            include_sbar_eigvec_starts: !self.no_eigen_starts,
            seed,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    subjects: PathBuf,
    /// Directory of per-unit CSVs or one long-format CSV.
    #[arg(long)]
    mediators: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_components: usize,
    #[arg(long, default_value_t = DEFAULT_DFD_THRESHOLD)]
    dfd_threshold: f64,
    #[arg(long, value_enum, default_value_t = HChoice::Pooled)]
    h: HChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Center each unit's mediator observations before fitting.
    #[arg(long)]
    center: bool,
    /// Ignore the confounder columns.
    #[arg(long)]
    no_confounders: bool,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long, short, default_value = "result.json")]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct FitConfig {
    subjects: PathBuf,
    mediators: PathBuf,
    load: LoadOptions,
    no_confounders: bool,
    h: HChoice,
    max_components: usize,
    dfd_threshold: f64,
    optimizer: OptimizerConfig,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    /// Output of `gmed fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Override the subject table recorded in the fit.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Override the mediator source recorded in the fit.
    #[arg(long)]
    mediators: Option<PathBuf>,
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include every replicate's estimates in the output.
    #[arg(long)]
    keep_draws: bool,
    #[arg(long, short, default_value = "bootstrap.json")]
    out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
struct DesignArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    sim: u8,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long = "T", default_value_t = 100)]
    t: usize,
    /// Comma-separated 1-based mediation dimensions.
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    mediation_dims: Vec<usize>,
    /// Draw non-mediation eigenvalues on the raw rather than log scale.
    #[arg(long)]
    raw_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DesignArgs {
    fn design(&self) -> SimulationDesign {
        let base = if self.sim == 1 {
            SimulationDesign::sim1(self.n, self.t)
        } else {
            SimulationDesign::sim2(self.n, self.t)
        };
        SimulationDesign {
            p: self.p,
            mediation_dims: self.mediation_dims.clone(),
            raw_scale: self.raw_scale,
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Write the dataset without its confounder columns.
    #[arg(long)]
    misspecify: bool,
    /// Output directory: subjects.csv, mediators/, truth.json.
    #[arg(long, short, default_value = "sim")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Fit without the confounders.
    #[arg(long)]
    misspecify: bool,
    #[arg(long, default_value_t = 4)]
    max_components: usize,
    #[arg(long, default_value_t = DEFAULT_DFD_THRESHOLD)]
    dfd_threshold: f64,
    #[arg(long, value_enum, default_value_t = HChoice::Pooled)]
    h: HChoice,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Metrics table.
    #[arg(long, short, default_value = "metrics.csv")]
    out: PathBuf,
    /// Also write the full report with per-replicate records.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Input(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<GmedError> for Failure {
    fn from(e: GmedError) -> Self {
        match e {
            GmedError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            e if e.is_input_error() => Failure::Input(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text + "\n").map_err(|e| input_err(path, e))
}

fn load(
    subjects: &Path,
    mediators: &Path,
    load: LoadOptions,
    no_confounders: bool,
) -> Result<gmed::Dataset, Failure> {
    let data = load_dataset(subjects, mediators, load)?;
    Ok(if no_confounders {
        data.without_confounders()
    } else {
        data
    })
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let config = FitConfig {
        subjects: args.subjects.clone(),
        mediators: args.mediators.clone(),
        load: LoadOptions {
            center: args.center,
        },
        no_confounders: args.no_confounders,
        h: args.h,
        max_components: args.max_components,
        dfd_threshold: args.dfd_threshold,
        optimizer: args.optimizer.config(args.seed),
    };
    config.optimizer.validate()?;
    if args.max_components == 0 {
        return Err(Failure::Usage("--max-components must be at least 1".into()));
    }
    if !(args.dfd_threshold >= 1.0) {
        return Err(Failure::Usage("--dfd-threshold must be at least 1".into()));
    }
    let mut manifest = ManifestBuilder::new("fit", args.seed, &config);
    manifest
        .input(&args.subjects)
        .map_err(|e| input_err(&args.subjects, e))?;
    manifest
        .input(&args.mediators)
        .map_err(|e| input_err(&args.mediators, e))?;

    let data = load(
        &args.subjects,
        &args.mediators,
        config.load,
        config.no_confounders,
    )?;
    log::info!(
        "loaded {} units, p = {}, q = {}",
        data.n(),
        data.p(),
        data.q()
    );
    let h = ConstraintMatrix::for_dataset(args.h.into(), &data)?;
    let fit_data = FitData::from_dataset(&data);
    let max_k = args.max_components.min(data.p());
    let set = select_components(
        &fit_data,
        h.matrix(),
        &config.optimizer,
        max_k,
        args.dfd_threshold,
    )?;
    log::info!(
        "kept {} components, DfD trace {:?}",
        set.len(),
        set.dfd_trace
    );

    let result = StudyResult::new(manifest.finish(), data.n(), data.p(), data.q(), &set);
    write_json(&args.out, &result)
}

fn cmd_bootstrap(args: BootstrapArgs) -> Result<(), Failure> {
    if args.b == 0 {
        return Err(Failure::Usage("--B must be at least 1".into()));
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Usage("--level must lie in (0, 1)".into()));
    }
    let text = fs::read_to_string(&args.fit).map_err(|e| input_err(&args.fit, e))?;
    let fit: StudyResult = serde_json::from_str(&text).map_err(|e| input_err(&args.fit, e))?;
    let fit_config: FitConfig =
        serde_json::from_value(fit.manifest.config.clone()).map_err(|e| {
            input_err(
                &args.fit,
                format!("manifest is not a fit configuration: {e}"),
            )
        })?;
    let subjects = args.subjects.clone().unwrap_or(fit_config.subjects.clone());
    let mediators = args
        .mediators
        .clone()
        .unwrap_or(fit_config.mediators.clone());

    let config = BootstrapConfig {
        n_boot: args.b,
        ci_level: args.level,
        seed: args.seed,
        optimizer: fit_config.optimizer.clone(),
    };
    #[derive(Serialize)]
    struct Recorded<'a> {
        fit: &'a Path,
        subjects: &'a Path,
        mediators: &'a Path,
        keep_draws: bool,
        bootstrap: &'a BootstrapConfig,
    }
    let mut manifest = ManifestBuilder::new(
        "bootstrap",
        args.seed,
        Recorded {
            fit: &args.fit,
            subjects: &subjects,
            mediators: &mediators,
            keep_draws: args.keep_draws,
            bootstrap: &config,
        },
    );
    for path in [&args.fit, &subjects, &mediators] {
        manifest.input(path).map_err(|e| input_err(path, e))?;
    }

    let data = load(
        &subjects,
        &mediators,
        fit_config.load,
        fit_config.no_confounders,
    )?;
    if data.p() != fit.p || data.n() != fit.n {
        return Err(Failure::Input(format!(
            "dataset has n = {}, p = {} but the fit was made with n = {}, p = {}",
            data.n(),
            data.p(),
            fit.n,
            fit.p
        )));
    }
    let set = fit.component_set();
    let fit_data = FitData::from_dataset(&data);
    let mut result = bootstrap(&fit_data, &set, &config)?;
    if 2 * result.n_failed > result.n_boot {
        return Err(Failure::Numerical(format!(
            "{} of {} bootstrap replicates failed",
            result.n_failed, result.n_boot
        )));
    }
    if !args.keep_draws {
        result.drop_draws();
    }
    write_json(
        &args.out,
        &BootstrapOut {
            manifest: manifest.finish(),
            result,
        },
    )
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let design = args.design.design();
    design.validate()?;
    #[derive(Serialize)]
    struct Recorded<'a> {
        design: &'a SimulationDesign,
        misspecify: bool,
        out: &'a Path,
    }
    let manifest = ManifestBuilder::new(
        "simulate",
        design.seed,
        Recorded {
            design: &design,
            misspecify: args.misspecify,
            out: &args.out,
        },
    );
    let (data, truth) = generate_dataset(&design)?;
    let data = if args.misspecify {
        data.without_confounders()
    } else {
        data
    };
    fs::create_dir_all(&args.out).map_err(|e| input_err(&args.out, e))?;
    write_dataset(
        &data,
        &args.out.join("subjects.csv"),
        &args.out.join("mediators"),
    )?;
    let out = TruthOut {
        manifest: manifest.finish(),
        design: design.clone(),
        misspecified: args.misspecify,
        pi: (0..design.p)
            .map(|j| truth.pi.column(j).iter().copied().collect())
            .collect(),
        mediation_dims: truth.mediation_dims.clone(),
        alpha0: truth.alpha0,
        alpha: truth.alpha,
        beta: truth.beta,
        gamma0: truth.gamma0,
        gamma: truth.gamma,
        phi1: truth.phi1.clone(),
        phi2: truth.phi2.clone(),
        aie: truth.aie,
        ade: truth.ade,
        ate: truth.aie + truth.ade,
    };
    write_json(&args.out.join("truth.json"), &out)
}

fn cmd_replicate(args: ReplicateArgs) -> Result<(), Failure> {
    let design = args.design.design();
    design.validate()?;
    if args.reps == 0 {
        return Err(Failure::Usage("--reps must be at least 1".into()));
    }
    let method = MethodConfig {
        optimizer: args.optimizer.config(design.seed),
        constraint: args.h.into(),
        max_components: args.max_components,
        dfd_threshold: args.dfd_threshold,
        misspecify: args.misspecify,
    };
    method.optimizer.validate()?;
    #[derive(Serialize)]
    struct Recorded<'a> {
        design: &'a SimulationDesign,
        reps: usize,
        method: &'a MethodConfig,
    }
    let manifest = ManifestBuilder::new(
        "replicate",
        design.seed,
        Recorded {
            design: &design,
            reps: args.reps,
            method: &method,
        },
    );
    let report = replication_study(&design, args.reps, &method)?;
    let manifest = manifest.finish();
    let header = serde_json::to_string(&manifest).expect("manifest serializes");
    let table = metrics_csv(&report)?;
    fs::write(&args.out, format!("# manifest: {header}\n{table}"))
        .map_err(|e| input_err(&args.out, e))?;
    if let Some(path) = &args.json {
        #[derive(Serialize)]
        struct Full<'a> {
            manifest: &'a manifest::RunManifest,
            #[serde(flatten)]
            report: &'a gmed::simulate::ReplicationReport,
        }
        write_json(
            path,
            &Full {
                manifest: &manifest,
                report: &report,
            },
        )?;
    }
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("GMED_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("GMED_THREADS='{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Failure::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Replicate(a) => cmd_replicate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
