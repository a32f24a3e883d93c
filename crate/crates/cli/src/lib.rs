//! `s2rl` command-line front end: configuration, run directories and the
//! subcommands that drive data generation, training, evaluation, gap
//! diagnostics, sweeps and plots.

pub mod config;
pub mod plot;
pub mod rundir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2rl_core::datastore::{load_dataset, load_dataset_for, make_offline_dataset, Batch, DataError, Generator, Transition};
use s2rl_core::envsim::{make_env, EnvSpec, Family, Perturbation, Role};
use s2rl_core::gapmetrics::{degradation_study, kl_ratio, m_identity_gap, GapCell, GapError, GapReport, MIN_KL_SAMPLES};
use s2rl_core::latentspace::{load_latent, save_latent, LatentModel};
use s2rl_core::orchestrator::{
    eval_csv, evaluate, history_csv, phase1_single_env, run_latent_training, run_pooled_baseline, select_best,
    Dynamics, Encoder, EvalRecord, Mode, Phase1, RunError, RunManifest, TrainerConfig,
};
use s2rl_core::sacpolicy::{load_agent, save_agent, train_sac_online, ActMode, Agent, AgentPolicy};
use s2rl_core::worldmodel::{load_model, save_model};
use serde_json::json;
use thiserror::Error;

pub use config::{load_config, parse_config, ExperimentConfig};
use rundir::{short_hash, RunDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_RUN: i32 = 5;
pub const EXIT_IO: i32 = 6;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Parse { .. } | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Run(_) => EXIT_RUN,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Parse { .. } => "config_parse",
            CliError::Invalid(_) => "invalid_config",
            CliError::Missing(_) => "missing_input",
            CliError::Run(_) => "run_failed",
            CliError::Io(_) => "io",
        }
    }

    /// Single-line JSON error record written to stderr.
    pub fn record(&self) -> String {
        let mut rec = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Invalid(v) => rec["violations"] = json!(v),
            CliError::Parse { line, column, .. } => {
                rec["line"] = json!(line);
                rec["column"] = json!(column);
            }
            _ => {}
        }
        rec.to_string()
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(v) => CliError::Invalid(v),
            RunError::Data(d) => d.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(io.to_string()),
            DataError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<GapError> for CliError {
    fn from(e: GapError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<s2rl_core::envsim::EnvError> for CliError {
    fn from(e: s2rl_core::envsim::EnvError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<s2rl_core::latentspace::LatentError> for CliError {
    fn from(e: s2rl_core::latentspace::LatentError) -> Self {
        CliError::Run(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Missing(format!("{}: {e}", path.display()))
    } else {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "s2rl", version, about = "Sim-to-real latent-space MBPO experiments")]
struct Cli {
    /// JSON experiment config; defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides S2RL_OUT and the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Simulator perturbation axis.
    #[arg(long)]
    axis: Option<Perturbation>,
    /// Simulator perturbation scale.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct ReportArgs {
    /// Latent run directories to analyse; without any, the sweep scales are
    /// trained (or reused) first.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    #[arg(long)]
    axis: Option<Perturbation>,
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the offline dataset on the real environment.
    GenData {
        #[arg(long)]
        quality: Option<Generator>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Single-environment MBPO on the offline data (offline-only baseline).
    TrainSingle {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Latent two-environment training.
    TrainLatent(RunArgs),
    /// Pooled two-environment training without a latent space.
    TrainBaseline(RunArgs),
    /// Re-evaluate a run's saved best policy.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the seed recorded for the best evaluation.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// m-identity gap and KL ratio across scales.
    GapReport(ReportArgs),
    /// KL(real ‖ sim) in original and latent coordinates across scales.
    KlReport {
        #[command(flatten)]
        report: ReportArgs,
        /// Add the k-nearest-neighbor cross-check.
        #[arg(long)]
        knn: bool,
    },
    /// Transfer a policy trained on the unperturbed environment across scales.
    Degrade {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        axis: Vec<Perturbation>,
        /// Number of evaluation seeds (0, 1, ...).
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Agent checkpoint to evaluate instead of training one.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Modes × axes × scales × seeds, summarised as a Sim/Real/Sim+Real table.
    Sweep {
        #[arg(long)]
        mode: Vec<Mode>,
        #[arg(long)]
        axis: Vec<Perturbation>,
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
        /// Number of seeds (0, 1, ...).
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// SVG line chart of a CSV (first column on the x axis).
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/plots/<input stem>.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Runs one command line; returns the process exit code. Failures print a
/// JSON error record on stderr.
/// Parses `argv` and runs the subcommand without printing anything;
/// returns the paths of the primary outputs.
pub fn run_args<I, T>(argv: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string().trim().to_string()))?;
    execute(cli)
}

pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(err) => {
            eprintln!("{}", err.record());
            err.exit_code()
        }
    }
}

/// Shared state of one invocation: resolved config and output root.
struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(root) = std::env::var_os("S2RL_OUT").filter(|v| !v.is_empty()) {
        config.output_dir = PathBuf::from(root);
    }
    if let Some(root) = cli.out {
        config.output_dir = root;
    }
    let out = config.output_dir.clone();
    let mut ctx = Ctx { config, out };
    match cli.command {
        Command::GenData { quality, size, seed } => {
            let d = &mut ctx.config.dataset;
            d.quality = quality.unwrap_or(d.quality);
            d.size = size.unwrap_or(d.size);
            d.seed = seed.unwrap_or(d.seed);
            d.path = None;
            d.generate = true;
            ctx.config.validate()?;
            let (_, path) = ctx.dataset()?;
            Ok(vec![path])
        }
        Command::TrainSingle { seed } => {
            if let Some(s) = seed {
                ctx.config.trainer.seed = s;
            }
            ctx.config.validate()?;
            let (_, dir) = ctx.phase1()?;
            Ok(vec![dir])
        }
        Command::TrainLatent(args) => ctx.train_command(Mode::Latent, args),
        Command::TrainBaseline(args) => ctx.train_command(Mode::PooledBaseline, args),
        Command::Eval { run, seed, episodes } => {
            let name = run
                .canonicalize()
                .ok()
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .ok_or_else(|| CliError::Missing(format!("run directory {}", run.display())))?;
            let path = ctx.reports_dir()?.join(format!("eval-{name}.csv"));
            reevaluate(&run, seed, episodes, &path)?;
            Ok(vec![path])
        }
        Command::GapReport(args) => ctx.gap_command(args, None),
        Command::KlReport { report, knn } => ctx.gap_command(report, Some(knn)),
        Command::Degrade {
            family,
            axis,
            seeds,
            scales,
            episodes,
            policy,
        } => {
            let d = &mut ctx.config.degrade;
            if !scales.is_empty() {
                d.scales = scales;
            }
            d.episodes = episodes.unwrap_or(d.episodes);
            if policy.is_some() {
                d.policy = policy;
            }
            let family = family.unwrap_or(ctx.config.sweep.family);
            let axes = if axis.is_empty() { family.axes().to_vec() } else { axis };
            let seeds: Vec<u64> = match seeds {
                Some(n) => (0..n).collect(),
                None => ctx.config.sweep.seeds.clone(),
            };
            ctx.config.validate()?;
            ctx.degrade(family, &axes, &seeds)
        }
        Command::Sweep {
            mode,
            axis,
            scales,
            seeds,
        } => {
            let s = &mut ctx.config.sweep;
            if !mode.is_empty() {
                s.modes = mode;
            }
            if !axis.is_empty() {
                s.axes = axis;
            }
            if !scales.is_empty() {
                s.scales = scales;
            }
            if let Some(n) = seeds {
                s.seeds = (0..n).collect();
            }
            ctx.config.validate()?;
            ctx.sweep()
        }
        Command::Plot { input, output } => {
            let text = read_text(&input)?;
            let output = match output {
                Some(p) => p,
                None => {
                    let dir = ctx.out.join("plots");
                    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                    let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    dir.join(format!("{stem}.svg"))
                }
            };
            let (x, series) = plot::parse_series(&text).map_err(|e| CliError::Run(format!("{}: {e}", input.display())))?;
            let title = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let svg = plot::line_chart(&title, &x, &series);
            std::fs::write(&output, svg).map_err(|e| io_err(&output, e))?;
            Ok(vec![output])
        }
    }
}

/// Phase-2 run outputs needed by reports.
struct RunSummary {
    dir: PathBuf,
    manifest: RunManifest,
    gap: Option<GapCell>,
}

fn transitions_meta(spec: &EnvSpec) -> serde_json::Value {
    json!({ "env_spec": spec })
}

fn save_transitions(path: &Path, spec: &EnvSpec, ts: &[Transition]) -> Result<(), CliError> {
    let b = Batch::from_transitions(ts);
    s2rl_core::datastore::save_arrays(path, "transitions", &transitions_meta(spec), &[&b.s, &b.a, &b.r, &b.s_next, &b.done])?;
    Ok(())
}

fn load_observations(path: &Path) -> Result<s2rl_core::numgrad::Array, CliError> {
    let (_, arrays): (serde_json::Value, Vec<_>) = s2rl_core::datastore::load_arrays(path, "transitions")?;
    arrays.into_iter().next().ok_or_else(|| CliError::Run(format!("{}: no observations", path.display())))
}

fn gap_cell(model: &LatentModel, offline: &[Transition], sim_obs: &s2rl_core::numgrad::Array, scale: f64, knn: bool) -> Result<GapCell, CliError> {
    let real = Batch::from_transitions(offline).s;
    Ok(GapCell {
        scale,
        m_identity_gap: m_identity_gap(model, &real)?,
        kl: kl_ratio(model, &real, sim_obs, knn)?,
    })
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    fn reports_dir(&self) -> Result<PathBuf, CliError> {
        let d = self.out.join("reports");
        std::fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        Ok(d)
    }

    /// The offline dataset: the configured file, or a generated one cached
    /// under `<out>/data/`. Always read back from disk so that fresh and
    /// cached runs see identical bytes.
    fn dataset(&self) -> Result<(Vec<Transition>, PathBuf), CliError> {
        let d = &self.config.dataset;
        let real = &self.config.trainer.real;
        if let Some(p) = d.path.as_ref().filter(|p| p.exists()) {
            let (ts, _) = load_dataset_for(p, real)?;
            return Ok((ts, p.clone()));
        }
        let key = short_hash(&json!({
            "real": real, "quality": d.quality, "size": d.size, "seed": d.seed, "gen": d.gen,
        }));
        let dir = self.data_dir();
        let path = dir.join(format!("{}-{}-{key}.bin", d.quality, d.size));
        if !path.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
            let mut ds = make_offline_dataset(real, d.quality, d.size, &d.gen, &mut rng)?;
            let tmp = path.with_extension("tmp");
            ds.save(&tmp)?;
            let json_path = path.with_extension("json");
            std::fs::write(&json_path, ds.manifest.to_json()).map_err(|e| io_err(&json_path, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        }
        let (ts, _) = load_dataset(&path)?;
        Ok((ts, path))
    }

    /// Phase-1 training, cached by everything it depends on. The simulator
    /// spec only affects the reported sim column, so it is not part of the key.
    fn phase1(&self) -> Result<(Phase1, PathBuf), CliError> {
        let (offline, data_path) = self.dataset()?;
        let t = &self.config.trainer;
        let checksum = load_dataset(&data_path)?.1.content_checksum;
        let key = short_hash(&json!({
            "data": checksum, "model": t.model, "sac": t.sac, "phase1": t.phase1, "real": t.real,
            "depth": t.rollout_depth, "episodes": t.eval_episodes, "seed": t.seed,
        }));
        let dir = self.runs_dir().join(format!("offline_only-{key}"));
        if !RunDir::is_complete(&dir) {
            let trainer = TrainerConfig {
                mode: Mode::OfflineOnly,
                ..t.clone()
            };
            let p1 = phase1_single_env(&trainer, &offline)?;
            let mut run = RunDir::create(&dir)?;
            let mut config = self.config.clone();
            config.trainer = trainer;
            run.write("config.json", config.to_json())?;
            run.write("evals.csv", eval_csv(&p1.manifest.evals))?;
            run.write("history.csv", history_csv(&p1.manifest.history))?;
            run.save("agent.bin", |p| save_agent(p, &p1.agent))?;
            run.save("best_agent.bin", |p| save_agent(p, &p1.agent))?;
            run.save("model.bin", |p| save_model(p, &p1.model))?;
            if self.config.reports.plots {
                run.plot("evals.svg", &p1.manifest.evals)?;
            }
            run.finish(p1.manifest)?;
        }
        let manifest = RunManifest::from_json(&read_text(&dir.join("manifest.json"))?)
            .map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
        let p1 = Phase1 {
            model: load_model(&dir.join("model.bin"))?,
            agent: load_agent(&dir.join("agent.bin"))?,
            manifest,
        };
        Ok((p1, dir))
    }

    /// One phase-2 run in `<out>/runs/`, reused when an identical run
    /// already completed there.
    fn phase2(&self, mode: Mode, axis: Perturbation, scale: f64, seed: u64) -> Result<RunSummary, CliError> {
        let mut config = self.config.clone();
        let t = &mut config.trainer;
        t.mode = mode;
        t.seed = seed;
        t.sim = EnvSpec {
            family: self.config.sweep.family,
            perturbation: axis,
            scale,
            ..t.sim.clone()
        };
        if mode == Mode::OfflineOnly {
            let (p1, dir) = self.phase1()?;
            return Ok(RunSummary {
                dir,
                manifest: p1.manifest,
                gap: None,
            });
        }
        config.validate()?;
        let t = &config.trainer;
        let name = format!("{mode}-{}-{axis}-{scale}-seed{seed}", t.sim.family);
        let dir = self.runs_dir().join(name);
        let config_json = config.to_json();
        if !RunDir::is_complete(&dir) || read_text(&dir.join("config.json"))? != config_json {
            let (offline, _) = self.dataset()?;
            let (p1, _) = self.phase1()?;
            let outcome = match mode {
                Mode::Latent => run_latent_training(t, &offline, &p1)?,
                _ => run_pooled_baseline(t, &offline, &p1)?,
            };
            let mut run = RunDir::create(&dir)?;
            run.write("config.json", config_json)?;
            run.write("evals.csv", eval_csv(&outcome.manifest.evals))?;
            run.write("history.csv", history_csv(&outcome.manifest.history))?;
            run.save("agent.bin", |p| save_agent(p, &outcome.agent))?;
            run.save("best_agent.bin", |p| save_agent(p, &outcome.best_agent))?;
            run.save_with("env.bin", |p| save_transitions(p, &t.sim, &outcome.env_buffer.to_vec()))?;
            match &outcome.dynamics {
                Dynamics::Latent(m) => {
                    run.save("latent.bin", |p| save_latent(p, m))?;
                    if let Some(best) = &outcome.best_latent {
                        run.save("best_latent.bin", |p| save_latent(p, best))?;
                    }
                    let sim_obs = Batch::from_transitions(&outcome.env_buffer.to_vec()).s;
                    // too few simulator samples for the KL estimate: no gap record
                    match gap_cell(m, &offline, &sim_obs, scale, self.config.reports.knn) {
                        Ok(cell) => run.write("gap.json", serde_json::to_string_pretty(&cell).expect("gap serializes"))?,
                        Err(CliError::Run(_)) if sim_obs.rows() < MIN_KL_SAMPLES => {}
                        Err(e) => return Err(e),
                    }
                }
                Dynamics::Pooled(m) => run.save("model.bin", |p| save_model(p, m))?,
            }
            if self.config.reports.plots {
                run.plot("evals.svg", &outcome.manifest.evals)?;
            }
            run.finish(outcome.manifest)?;
        }
        load_summary(&dir)
    }

    fn train_command(&mut self, mode: Mode, args: RunArgs) -> Result<Vec<PathBuf>, CliError> {
        let t = &mut self.config.trainer;
        if let Some(a) = args.axis {
            t.sim.perturbation = a;
        }
        if let Some(s) = args.scale {
            t.sim.scale = s;
        }
        if let Some(s) = args.seed {
            t.seed = s;
        }
        let (axis, scale, seed) = (t.sim.perturbation, t.sim.scale, t.seed);
        self.config.sweep.family = t.sim.family;
        self.config.validate()?;
        Ok(vec![self.phase2(mode, axis, scale, seed)?.dir])
    }

    fn gap_command(&mut self, args: ReportArgs, kl_only: Option<bool>) -> Result<Vec<PathBuf>, CliError> {
        if let Some(knn) = kl_only {
            self.config.reports.knn |= knn;
        }
        if let Some(a) = args.axis {
            self.config.sweep.axes = vec![a];
        }
        if !args.scales.is_empty() {
            self.config.sweep.scales = args.scales;
        }
        self.config.validate()?;
        let seed = args.seed.unwrap_or(self.config.sweep.seeds[0]);
        let knn = self.config.reports.knn;
        // (axis, cell) pairs
        let mut cells: Vec<(Perturbation, GapCell)> = Vec::new();
        if args.runs.is_empty() {
            for &axis in &self.config.sweep.axes {
                for &scale in &self.config.sweep.scales {
                    let s = self.phase2(Mode::Latent, axis, scale, seed)?;
                    let cell = match s.gap {
                        Some(c) if c.kl.knn_original.is_some() || !knn => c,
                        _ => recompute_gap(&s.dir, knn)?,
                    };
                    cells.push((axis, cell));
                }
            }
        } else {
            for dir in &args.runs {
                let cfg: ExperimentConfig = parse_config(&read_text(&dir.join("config.json"))?)?;
                if cfg.trainer.mode != Mode::Latent {
                    return Err(CliError::Run(format!("{} is not a latent run", dir.display())));
                }
                cells.push((cfg.trainer.sim.perturbation, recompute_gap(dir, knn)?));
            }
        }
        let family = self.config.sweep.family;
        let reports = self.reports_dir()?;
        let mut axes: Vec<Perturbation> = cells.iter().map(|c| c.0).collect();
        axes.dedup();
        let mut written = Vec::new();
        for axis in axes {
            let mut report = GapReport::new(family, axis, seed);
            report.cells = cells.iter().filter(|c| c.0 == axis).map(|c| c.1.clone()).collect();
            if kl_only.is_some() {
                let path = reports.join(format!("kl-{family}-{axis}-seed{seed}.csv"));
                write_file(&path, kl_csv(&report))?;
                written.push(path);
            } else {
                let path = reports.join(format!("gap-{family}-{axis}-seed{seed}.csv"));
                write_file(&path, report.to_csv())?;
                write_file(&path.with_extension("json"), report.to_json())?;
                written.push(path);
            }
        }
        Ok(written)
    }

    fn degrade(&self, family: Family, axes: &[Perturbation], seeds: &[u64]) -> Result<Vec<PathBuf>, CliError> {
        let d = &self.config.degrade;
        let agent = match &d.policy {
            Some(p) => load_agent(p)?,
            None => {
                let key = short_hash(&json!({
                    "family": family, "steps": d.train_steps, "seed": d.train_seed, "online": d.online,
                }));
                let dir = self.out.join("degrade");
                let path = dir.join(format!("{family}-policy-{key}.bin"));
                if !path.exists() {
                    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                    let env = make_env(&EnvSpec::base(family, Role::Real))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(d.train_seed);
                    let (agent, _) = train_sac_online(&env, &d.online, d.train_steps, &mut rng, |_, _, _| false)?;
                    let tmp = path.with_extension("tmp");
                    save_agent(&tmp, &agent)?;
                    std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
                }
                load_agent(&path)?
            }
        };
        let policy = AgentPolicy {
            agent: &agent,
            mode: ActMode::Deterministic,
        };
        let table = degradation_study(&policy, family, axes, &d.scales, d.episodes, seeds)?;
        let reports = self.reports_dir()?;
        let path = reports.join(format!("degrade-{family}.csv"));
        write_file(&path, table.to_csv())?;
        write_file(&reports.join(format!("degrade-{family}-long.csv")), table.to_long_csv())?;
        write_file(&path.with_extension("json"), table.to_json())?;
        Ok(vec![path])
    }

    fn sweep(&self) -> Result<Vec<PathBuf>, CliError> {
        let s = &self.config.sweep;
        let modes: Vec<Mode> = s.modes.iter().copied().filter(|&m| m != Mode::OfflineOnly).collect();
        let (p1, _) = self.phase1()?;
        let offline_real = select_best(&p1.manifest.evals)?.real_return;
        let mut rows = Vec::new();
        for &axis in &s.axes {
            for &scale in &s.scales {
                for &mode in &modes {
                    for &seed in &s.seeds {
                        let run = self.phase2(mode, axis, scale, seed)?;
                        let best = select_best(&run.manifest.evals)?.clone();
                        rows.push(SweepRow {
                            mode,
                            axis,
                            scale,
                            seed,
                            best,
                            gap: run.gap.map(|g| g.m_identity_gap),
                        });
                    }
                }
            }
        }
        let reports = self.reports_dir()?;
        let family = s.family;
        let table = reports.join(format!("sweep-{family}.csv"));
        write_file(&table, sweep_table(&modes, &s.axes, &s.scales, offline_real, &rows))?;
        write_file(&reports.join(format!("sweep-{family}-seeds.csv")), sweep_long(offline_real, &rows))?;
        Ok(vec![table])
    }
}

fn write_file(path: &Path, text: String) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let manifest = RunManifest::from_json(&read_text(&dir.join("manifest.json"))?)
        .map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
    let gap_path = dir.join("gap.json");
    let gap = if gap_path.exists() {
        Some(serde_json::from_str(&read_text(&gap_path)?).map_err(|e| CliError::Run(format!("{}: {e}", gap_path.display())))?)
    } else {
        None
    };
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        manifest,
        gap,
    })
}

/// Gap metrics from a latent run directory's checkpoints.
fn recompute_gap(dir: &Path, knn: bool) -> Result<GapCell, CliError> {
    let cfg: ExperimentConfig = parse_config(&read_text(&dir.join("config.json"))?)?;
    let model = load_latent(&dir.join("latent.bin"))?;
    let sim_obs = load_observations(&dir.join("env.bin"))?;
    let ctx = Ctx {
        out: cfg.output_dir.clone(),
        config: cfg,
    };
    let (offline, _) = match &ctx.config.dataset.path {
        Some(p) if p.exists() => ctx.dataset()?,
        _ => locate_dataset(dir, &ctx)?,
    };
    gap_cell(&model, &offline, &sim_obs, ctx.config.trainer.sim.scale, knn)
}

/// Generated datasets live in `<root>/data/` next to `<root>/runs/<run>`.
fn locate_dataset(run_dir: &Path, ctx: &Ctx) -> Result<(Vec<Transition>, PathBuf), CliError> {
    let root = run_dir
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| CliError::Missing(format!("{}: cannot locate output root", run_dir.display())))?;
    let relocated = Ctx {
        config: ctx.config.clone(),
        out: root.to_path_buf(),
    };
    let d = &relocated.config.dataset;
    let key = short_hash(&json!({
        "real": relocated.config.trainer.real, "quality": d.quality, "size": d.size, "seed": d.seed, "gen": d.gen,
    }));
    let path = relocated.data_dir().join(format!("{}-{}-{key}.bin", d.quality, d.size));
    if !path.exists() {
        return Err(CliError::Missing(format!("offline dataset {}", path.display())));
    }
    let (ts, _) = load_dataset(&path)?;
    Ok((ts, path))
}

/// Re-evaluates the best policy of a run with the recorded (or given) seed
/// and writes `reeval.csv` into the run directory.
fn reevaluate(dir: &Path, seed: Option<u64>, episodes: Option<usize>, path: &Path) -> Result<(), CliError> {
    let cfg: ExperimentConfig = parse_config(&read_text(&dir.join("config.json"))?)?;
    let summary = load_summary(dir)?;
    let best = select_best(&summary.manifest.evals)?;
    let agent: Agent = load_agent(&dir.join("best_agent.bin"))?;
    let latent = match cfg.trainer.mode {
        Mode::Latent => Some(load_latent(&dir.join("best_latent.bin"))?),
        _ => None,
    };
    let encoder = |side| match &latent {
        Some(m) => Encoder::Latent(m, side),
        None => Encoder::Identity,
    };
    let t = &cfg.trainer;
    let seed = seed.unwrap_or(best.eval_seed);
    let episodes = episodes.unwrap_or(t.eval_episodes);
    let sim = evaluate(&agent, &t.sim, encoder(Role::Sim), episodes, seed)?;
    let real = evaluate(&agent, &t.real, encoder(Role::Real), episodes, seed)?;
    let record = EvalRecord::new(best.iteration, sim, real).with_seed(seed);
    write_file(path, eval_csv(&[record]))
}

fn kl_csv(report: &GapReport) -> String {
    let mut out = String::from(
        "axis,scale,kl_original,kl_latent,kl_ratio,excluded_original,excluded_latent,floored,n_real,n_sim,knn_original,knn_latent\n",
    );
    let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.cells {
        let k = &c.kl;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            report.axis,
            c.scale,
            k.kl_original,
            k.kl_latent,
            k.kl_ratio,
            join(&k.excluded_original),
            join(&k.excluded_latent),
            k.floored,
            k.n_real,
            k.n_sim,
            opt(k.knn_original),
            opt(k.knn_latent)
        ));
    }
    out
}

#[derive(Clone, Debug)]
struct SweepRow {
    mode: Mode,
    axis: Perturbation,
    scale: f64,
    seed: u64,
    best: EvalRecord,
    gap: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Per mode: Sim, Real and Sim+Real of the selected policy, averaged over
/// seeds; the first row is the offline-only baseline (real column only).
fn sweep_table(modes: &[Mode], axes: &[Perturbation], scales: &[f64], offline_real: f64, rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,scale");
    for m in modes {
        out.push_str(&format!(",{m}_sim,{m}_real,{m}_sim_real"));
    }
    out.push_str("\noffline_only,-");
    for _ in modes {
        out.push_str(&format!(",-,{offline_real},-"));
    }
    out.push('\n');
    for &axis in axes {
        for &scale in scales {
            out.push_str(&format!("{axis},{scale}"));
            for &m in modes {
                let cell: Vec<&SweepRow> = rows
                    .iter()
                    .filter(|r| r.mode == m && r.axis == axis && r.scale == scale)
                    .collect();
                let sim = mean(&cell.iter().map(|r| r.best.sim_return).collect::<Vec<_>>());
                let real = mean(&cell.iter().map(|r| r.best.real_return).collect::<Vec<_>>());
                out.push_str(&format!(",{sim},{real},{}", sim + real));
            }
            out.push('\n');
        }
    }
    out
}

/// One line per run with its selected evaluation.
fn sweep_long(offline_real: f64, rows: &[SweepRow]) -> String {
    let mut out = String::from("mode,axis,scale,seed,iteration,sim_return,real_return,sum,offline_real,m_identity_gap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{offline_real},{}\n",
            r.mode,
            r.axis,
            r.scale,
            r.seed,
            r.best.iteration,
            r.best.sim_return,
            r.best.real_return,
            r.best.sum,
            r.gap.map(|g| g.to_string()).unwrap_or_default()
        ));
    }
    out
}
