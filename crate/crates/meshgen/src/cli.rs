//! Command-line entry point wiring synthesis, hierarchy construction,
//! training, generation, evaluation, and latent interpolation into
//! reproducible runs.
//!
//! Settings come from a flat `key = value` config file, overridden by
//! repeated `--set key=value` flags and finally by dedicated command
//! flags. Every run creates a directory named by timestamp and seed (or
//! uses `--run-dir` verbatim), writes its outputs there, and drops a
//! `resolved_config.txt` echo that reproduces the run.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numerical.
//! The `MESHGEN_LOG` environment variable selects stderr verbosity:
//! `quiet` (or `0`), `info` (default), `debug` (or `2`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{
    self, decode_latent, fid_score, generator_of, sample_model_latents, EvalError, InvertOptions,
};
use crate::hierarchy::{self, build_hierarchy, Hierarchy, HierarchyError};
use crate::laplacian::LaplacianError;
use crate::mesh::{load_mesh, save_mesh, Mesh, MeshError};
use crate::synthdata::{self, SynthConfig, SynthError};
use crate::training::{
    self, to_signal, to_vertices, Checkpoint, TrainConfig, TrainError, TrainSet, TrainedModel,
};

/// A command failure, already classified into its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad flags, bad config keys or values.
    Usage(String),
    /// Exit 2: missing, corrupt, or mutually inconsistent inputs.
    Data(String),
    /// Exit 3: numerical failure (non-finite losses, failed solvers).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<HierarchyError> for CliError {
    fn from(e: HierarchyError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LaplacianError> for CliError {
    fn from(e: LaplacianError) -> Self {
        match e {
            LaplacianError::DenseLimitExceeded { .. } => CliError::Usage(e.to_string()),
            LaplacianError::PowerIterationNoConvergence { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig { .. } | TrainError::Model(_) => CliError::Usage(e.to_string()),
            TrainError::NumericalAbort { .. } | TrainError::Diff(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::BadConfig { .. } => CliError::Usage(e.to_string()),
            SynthError::DegenerateSample { .. } => CliError::Numerical(e.to_string()),
            SynthError::Laplacian(l) => CliError::from(l),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Diff(d) => CliError::Numerical(d.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_data(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Evaluation settings not owned by another module's config.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub specificity_samples: usize,
    pub fid_samples: usize,
    pub feature_count: usize,
    pub invert_restarts: usize,
    pub invert_iterations: usize,
    pub invert_lr: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            specificity_samples: 1000,
            fid_samples: 200,
            feature_count: 16,
            invert_restarts: 5,
            invert_iterations: 500,
            invert_lr: 0.05,
        }
    }
}

/// Every tunable of every command, with explicit defaults. Populated from
/// the config file, then `--set` overrides, then command flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub hierarchy_levels: usize,
    pub hierarchy_factor: f64,
    /// `run.*` context keys from a replayed echo; accepted and re-echoed
    /// but never interpreted.
    pub run_context: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            hierarchy_levels: 4,
            hierarchy_factor: 4.0,
            run_context: BTreeMap::new(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("{key}: expected {kind}, got '{value}'"))
}

fn parse_channels(key: &str, value: &str) -> Result<Vec<usize>, String> {
    let parts: Result<Vec<usize>, _> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect();
    parts.map_err(|_| format!("{key}: expected comma-separated widths, got '{value}'"))
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys and malformed
    /// values come back as a message for the caller to collect.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "synth.level" => self.synth.level = parse_as(key, v, "an integer in [1, 5]")?,
            "synth.n_identities" => self.synth.n_identities = parse_as(key, v, "a count")?,
            "synth.n_expressions" => self.synth.n_expressions = parse_as(key, v, "a count")?,
            "synth.identity_factors" => self.synth.identity_factors = parse_as(key, v, "a count")?,
            "synth.identity_sigma" => self.synth.identity_sigma = parse_as(key, v, "a real")?,
            "synth.bump_count" => self.synth.bump_count = parse_as(key, v, "a count")?,
            "synth.bump_width" => self.synth.bump_width = parse_as(key, v, "a real")?,
            "synth.bump_amplitude" => self.synth.bump_amplitude = parse_as(key, v, "a real")?,
            "synth.seed" => self.synth.seed = parse_as(key, v, "an integer seed")?,
            "synth.train_fraction" => self.synth.train_fraction = parse_as(key, v, "a real")?,
            "model.k" => self.train.model.k = parse_as(key, v, "a count")?,
            "model.channels" => self.train.model.channels = parse_channels(key, v)?,
            "model.bottleneck" => self.train.model.bottleneck = parse_as(key, v, "a count")?,
            "model.skip_connections" => {
                self.train.model.skip_connections = parse_as(key, v, "true or false")?
            }
            "train.gamma" => self.train.gamma = parse_as(key, v, "a real")?,
            "train.lambda_k" => self.train.lambda_k = parse_as(key, v, "a real")?,
            "train.lr" => self.train.lr = parse_as(key, v, "a real")?,
            "train.lr_decay" => self.train.lr_decay = parse_as(key, v, "a real")?,
            "train.momentum" => self.train.momentum = parse_as(key, v, "a real")?,
            "train.epochs" => self.train.epochs = parse_as(key, v, "a count")?,
            "train.batch_size" => self.train.batch_size = parse_as(key, v, "a count")?,
            "train.seed" => self.train.seed = parse_as(key, v, "an integer seed")?,
            "eval.specificity_samples" => {
                self.eval.specificity_samples = parse_as(key, v, "a count")?
            }
            "eval.fid_samples" => self.eval.fid_samples = parse_as(key, v, "a count")?,
            "eval.feature_count" => self.eval.feature_count = parse_as(key, v, "a count")?,
            "eval.invert_restarts" => self.eval.invert_restarts = parse_as(key, v, "a count")?,
            "eval.invert_iterations" => self.eval.invert_iterations = parse_as(key, v, "a count")?,
            "eval.invert_lr" => self.eval.invert_lr = parse_as(key, v, "a real")?,
            "hierarchy.levels" => self.hierarchy_levels = parse_as(key, v, "a count")?,
            "hierarchy.factor" => self.hierarchy_factor = parse_as(key, v, "a real")?,
            _ if key.starts_with("run.") => {
                self.run_context.insert(key.to_string(), v.to_string());
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Renders the full key set (plus `run.*` context) as a config file
    /// that reproduces this configuration.
    pub fn render(&self, extra_context: &[(String, String)]) -> String {
        let mut out = String::new();
        let ch = &self.synth;
        let mut kv: Vec<(String, String)> = vec![
            ("synth.level".into(), ch.level.to_string()),
            ("synth.n_identities".into(), ch.n_identities.to_string()),
            ("synth.n_expressions".into(), ch.n_expressions.to_string()),
            ("synth.identity_factors".into(), ch.identity_factors.to_string()),
            ("synth.identity_sigma".into(), format!("{}", ch.identity_sigma)),
            ("synth.bump_count".into(), ch.bump_count.to_string()),
            ("synth.bump_width".into(), format!("{}", ch.bump_width)),
            ("synth.bump_amplitude".into(), format!("{}", ch.bump_amplitude)),
            ("synth.seed".into(), ch.seed.to_string()),
            ("synth.train_fraction".into(), format!("{}", ch.train_fraction)),
            ("model.k".into(), self.train.model.k.to_string()),
            (
                "model.channels".into(),
                self.train
                    .model
                    .channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.bottleneck".into(), self.train.model.bottleneck.to_string()),
            (
                "model.skip_connections".into(),
                self.train.model.skip_connections.to_string(),
            ),
            ("train.gamma".into(), format!("{}", self.train.gamma)),
            ("train.lambda_k".into(), format!("{}", self.train.lambda_k)),
            ("train.lr".into(), format!("{}", self.train.lr)),
            ("train.lr_decay".into(), format!("{}", self.train.lr_decay)),
            ("train.momentum".into(), format!("{}", self.train.momentum)),
            ("train.epochs".into(), self.train.epochs.to_string()),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.seed".into(), self.train.seed.to_string()),
            (
                "eval.specificity_samples".into(),
                self.eval.specificity_samples.to_string(),
            ),
            ("eval.fid_samples".into(), self.eval.fid_samples.to_string()),
            ("eval.feature_count".into(), self.eval.feature_count.to_string()),
            ("eval.invert_restarts".into(), self.eval.invert_restarts.to_string()),
            (
                "eval.invert_iterations".into(),
                self.eval.invert_iterations.to_string(),
            ),
            ("eval.invert_lr".into(), format!("{}", self.eval.invert_lr)),
            ("hierarchy.levels".into(), self.hierarchy_levels.to_string()),
            ("hierarchy.factor".into(), format!("{}", self.hierarchy_factor)),
        ];
        for (k, v) in &self.run_context {
            kv.push((k.clone(), v.clone()));
        }
        for (k, v) in extra_context {
            kv.push((k.clone(), v.clone()));
        }
        kv.sort();
        kv.dedup_by(|a, b| a.0 == b.0);
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses flat `key = value` text. Comments start with `#`; blank lines
/// are skipped. All problems (syntax, unknown keys, bad values) are
/// collected and reported together.
pub fn apply_config_text(config: &mut RunConfig, text: &str, origin: &str) -> Result<(), CliError> {
    let mut problems = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => {
                if let Err(msg) = config.apply(key.trim(), value) {
                    problems.push(format!("{origin}:{}: {msg}", lineno + 1));
                }
            }
            None => problems.push(format!(
                "{origin}:{}: expected 'key = value', got '{line}'",
                lineno + 1
            )),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(problems.join("; ")))
    }
}

fn apply_overrides(config: &mut RunConfig, sets: &[String]) -> Result<(), CliError> {
    let mut problems = Vec::new();
    for s in sets {
        match s.split_once('=') {
            Some((key, value)) => {
                if let Err(msg) = config.apply(key.trim(), value) {
                    problems.push(format!("--set {s}: {msg}"));
                }
            }
            None => problems.push(format!("--set {s}: expected key=value")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(problems.join("; ")))
    }
}

/// Parses an inclusive `start:end:step` grid such as `-0.5:2.0:0.25`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |why: &str| CliError::Usage(format!("grid '{spec}': {why}"));
    if parts.len() != 3 {
        return Err(bad("expected start:end:step"));
    }
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    let nums = nums.map_err(|_| bad("non-numeric component"))?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !step.is_finite() || step <= 0.0 {
        return Err(bad("step must be positive"));
    }
    if end < start {
        return Err(bad("end must not precede start"));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Began,
    Ae,
}

impl TrainMode {
    fn name(self) -> &'static str {
        match self {
            TrainMode::Began => "began",
            TrainMode::Ae => "ae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Identity,
    Expression,
}

impl Subset {
    fn name(self) -> &'static str {
        match self {
            Subset::Identity => "identity",
            Subset::Expression => "expression",
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "meshgen",
    version,
    about = "Spectral mesh generation: synthetic data, hierarchies, adversarial training, evaluation"
)]
pub struct Cli {
    /// Flat `key = value` config file applied before any overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Inline override, repeatable: --set train.epochs=10
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root under which the timestamped run directory is created.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Exact run directory (replaces the timestamped name; for
    /// reproducing runs).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset directory.
    Synth,
    /// Build and save the mesh hierarchy with per-level OBJs.
    Hierarchy {
        /// Template OBJ (level 0).
        #[arg(long)]
        template: PathBuf,
        /// Decimation rounds; overrides hierarchy.levels.
        #[arg(long)]
        levels: Option<usize>,
        /// Per-level reduction factor; overrides hierarchy.factor.
        #[arg(long)]
        factor: Option<f64>,
    },
    /// Train the adversarial pair or the autoencoder baseline.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Hierarchy file written by `hierarchy`.
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long, value_enum, default_value = "began")]
        mode: TrainMode,
        /// Which sample population to train on.
        #[arg(long, value_enum, default_value = "identity")]
        subset: Subset,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode random latents from a checkpoint into OBJs.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expression checkpoint; each output composes a random identity
        /// with a random expression.
        #[arg(long)]
        expression: Option<PathBuf>,
    },
    /// Compute intrinsic metrics against a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "identity")]
        subset: Subset,
        /// Comma list from {gen, spec, fid}.
        #[arg(long, default_value = "gen,spec,fid")]
        metrics: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode a latent interpolation between two anchor meshes; with an
    /// expression checkpoint, a two-axis composed grid.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        anchor_a: PathBuf,
        #[arg(long)]
        anchor_b: PathBuf,
        /// Inclusive start:end:step mixing grid; values outside [0, 1]
        /// extrapolate.
        #[arg(long, default_value = "0:1:0.25")]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        expression: Option<PathBuf>,
        #[arg(long)]
        expression_anchor_a: Option<PathBuf>,
        #[arg(long)]
        expression_anchor_b: Option<PathBuf>,
        /// Grid for the expression axis (defaults to --grid).
        #[arg(long)]
        expression_grid: Option<String>,
    },
}

/// Stderr logger driven by `MESHGEN_LOG`.
pub struct Logger {
    level: u8,
}

impl Logger {
    pub fn from_env() -> Logger {
        let level = match std::env::var("MESHGEN_LOG").ok().as_deref() {
            Some("0") | Some("quiet") => 0,
            Some("2") | Some("debug") => 2,
            _ => 1,
        };
        Logger { level }
    }

    pub fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth => "synth",
        Command::Hierarchy { .. } => "hierarchy",
        Command::Train { .. } => "train",
        Command::Generate { .. } => "generate",
        Command::Evaluate { .. } => "evaluate",
        Command::Interpolate { .. } => "interpolate",
    }
}

fn command_seed(cmd: &Command, config: &RunConfig) -> u64 {
    match cmd {
        Command::Synth => config.synth.seed,
        Command::Hierarchy { .. } => 0,
        Command::Train { seed, .. } => seed.unwrap_or(config.train.seed),
        Command::Generate { seed, .. }
        | Command::Evaluate { seed, .. }
        | Command::Interpolate { seed, .. } => *seed,
    }
}

fn make_run_dir(cli: &Cli, config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let name = format!(
                "{}_{}_seed{}",
                command_name(&cli.command),
                secs,
                command_seed(&cli.command, config)
            );
            cli.out.join(name)
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_data(&dir, e))?;
    Ok(dir)
}

fn write_echo(
    dir: &Path,
    config: &RunConfig,
    context: &[(String, String)],
) -> Result<(), CliError> {
    let path = dir.join("resolved_config.txt");
    std::fs::write(&path, config.render(context)).map_err(|e| io_data(&path, e))
}

fn ctx(key: &str, value: impl ToString) -> (String, String) {
    (format!("run.{key}"), value.to_string())
}

/// Parses flags, config file, and overrides into the effective settings.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_data(path, e))?;
        apply_config_text(&mut config, &text, &path.display().to_string())?;
    }
    apply_overrides(&mut config, &cli.overrides)?;
    Ok(config)
}

/// Runs one parsed command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let log = Logger::from_env();
    match dispatch(&cli, &log) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, log: &Logger) -> Result<(), CliError> {
    let mut config = resolve_config(cli)?;
    apply_command_flags(&cli.command, &mut config);
    let run_dir = make_run_dir(cli, &config)?;
    log.debug(format!("run directory: {}", run_dir.display()));
    match &cli.command {
        Command::Synth => cmd_synth(&config, &run_dir, log),
        Command::Hierarchy { template, .. } => {
            cmd_hierarchy(&config, template, &run_dir, log)
        }
        Command::Train { dataset, hierarchy, mode, subset, .. } => {
            cmd_train(&config, dataset, hierarchy, *mode, *subset, &run_dir, log)
        }
        Command::Generate { checkpoint, hierarchy, count, seed, expression } => cmd_generate(
            &config, checkpoint, hierarchy, *count, *seed, expression.as_deref(), &run_dir, log,
        ),
        Command::Evaluate { checkpoint, hierarchy, dataset, subset, metrics, seed } => {
            cmd_evaluate(
                &config, checkpoint, hierarchy, dataset, *subset, metrics, *seed, &run_dir, log,
            )
        }
        Command::Interpolate {
            checkpoint,
            hierarchy,
            anchor_a,
            anchor_b,
            grid,
            seed,
            expression,
            expression_anchor_a,
            expression_anchor_b,
            expression_grid,
        } => cmd_interpolate(
            &config,
            checkpoint,
            hierarchy,
            anchor_a,
            anchor_b,
            grid,
            *seed,
            expression.as_deref(),
            expression_anchor_a.as_deref(),
            expression_anchor_b.as_deref(),
            expression_grid.as_deref(),
            &run_dir,
            log,
        ),
    }
}

/// Dedicated command flags override config-file and `--set` values.
fn apply_command_flags(cmd: &Command, config: &mut RunConfig) {
    match cmd {
        Command::Hierarchy { levels, factor, .. } => {
            if let Some(l) = levels {
                config.hierarchy_levels = *l;
            }
            if let Some(f) = factor {
                config.hierarchy_factor = *f;
            }
        }
        Command::Train { epochs, seed, .. } => {
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
            if let Some(s) = seed {
                config.train.seed = *s;
            }
        }
        _ => {}
    }
}

fn cmd_synth(config: &RunConfig, run_dir: &Path, log: &Logger) -> Result<(), CliError> {
    let dataset = synthdata::generate_dataset(&config.synth)?;
    synthdata::write_dataset(&dataset, run_dir)?;
    write_echo(run_dir, config, &[ctx("command", "synth")])?;
    log.info(format!(
        "wrote {} identities and {} expressions to {}",
        dataset.identities.len(),
        dataset.expressions.len(),
        run_dir.display()
    ));
    Ok(())
}

fn cmd_hierarchy(
    config: &RunConfig,
    template_path: &Path,
    run_dir: &Path,
    log: &Logger,
) -> Result<(), CliError> {
    let template = load_mesh(template_path)?;
    let hierarchy = build_hierarchy(&template, config.hierarchy_levels, config.hierarchy_factor)?;
    let out = run_dir.join("hierarchy.bin");
    hierarchy.save(&out)?;
    hierarchy::export_level_objs(&hierarchy, run_dir)?;
    write_echo(
        run_dir,
        config,
        &[
            ctx("command", "hierarchy"),
            ctx("template", template_path.display()),
            ctx("hierarchy_file", out.display()),
            ctx("level_sizes", format!("{:?}", hierarchy.sizes())),
        ],
    )?;
    log.info(format!(
        "hierarchy with level sizes {:?} saved to {}",
        hierarchy.sizes(),
        out.display()
    ));
    Ok(())
}

/// The world-space meshes of a dataset split.
fn split_meshes(
    dataset: &synthdata::Dataset,
    subset: Subset,
    train: bool,
) -> Result<Vec<Mesh>, CliError> {
    let meshes = match (subset, train) {
        (Subset::Identity, true) => dataset.meshes(&dataset.train_identities),
        (Subset::Identity, false) => dataset.meshes(&dataset.test_identities),
        (Subset::Expression, which) => {
            let indices = if which {
                &dataset.train_expressions
            } else {
                &dataset.test_expressions
            };
            indices
                .iter()
                .map(|&i| {
                    dataset
                        .template
                        .with_vertices(
                            dataset.template.vertices() + &dataset.expressions[i].deformation,
                        )
                        .map_err(CliError::from)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    if meshes.is_empty() {
        return Err(CliError::Data(format!(
            "dataset has no {} {} meshes",
            if train { "training" } else { "test" },
            subset.name()
        )));
    }
    Ok(meshes)
}

fn load_consistent_hierarchy(path: &Path, ckpt: &Checkpoint) -> Result<Hierarchy, CliError> {
    let hierarchy = Hierarchy::load(path)?;
    let checksum = hierarchy::file_checksum(path).map_err(|e| io_data(path, e))?;
    ckpt.verify_hierarchy(&checksum)?;
    Ok(hierarchy)
}

fn check_template_consistency(dataset: &synthdata::Dataset, hierarchy: &Hierarchy) -> Result<(), CliError> {
    let ht = hierarchy.template();
    if ht.faces() != dataset.template.faces() || ht.n() != dataset.template.n() {
        return Err(CliError::Data(
            "hierarchy template topology does not match the dataset template".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &RunConfig,
    dataset_dir: &Path,
    hierarchy_path: &Path,
    mode: TrainMode,
    subset: Subset,
    run_dir: &Path,
    log: &Logger,
) -> Result<(), CliError> {
    let dataset = synthdata::load_dataset(dataset_dir)?;
    let hierarchy = Hierarchy::load(hierarchy_path)?;
    check_template_consistency(&dataset, &hierarchy)?;
    let meshes = split_meshes(&dataset, subset, true)?;
    let train_set = TrainSet::from_meshes(hierarchy.template(), &meshes)?;
    log.info(format!(
        "training {} on {} {} meshes for {} epochs",
        mode.name(),
        train_set.len(),
        subset.name(),
        config.train.epochs
    ));
    let report = match mode {
        TrainMode::Began => training::train_began(&hierarchy, &train_set, &config.train, run_dir)?,
        TrainMode::Ae => {
            training::train_autoencoder(&hierarchy, &train_set, &config.train, run_dir)?
        }
    };
    write_echo(
        run_dir,
        config,
        &[
            ctx("command", "train"),
            ctx("dataset", dataset_dir.display()),
            ctx("hierarchy", hierarchy_path.display()),
            ctx("mode", mode.name()),
            ctx("subset", subset.name()),
        ],
    )?;
    let last = report.rows.last().map(|r| r.loss_real).unwrap_or(f64::NAN);
    log.info(format!(
        "finished {} epochs ({} steps), final reconstruction loss {last:.6}, checkpoint {}",
        report.checkpoint.epoch,
        report.rows.len(),
        report.checkpoint_path.display()
    ));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: &RunConfig,
    checkpoint_path: &Path,
    hierarchy_path: &Path,
    count: usize,
    seed: u64,
    expression_path: Option<&Path>,
    run_dir: &Path,
    log: &Logger,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let hierarchy = load_consistent_hierarchy(hierarchy_path, &ckpt)?;
    let ops = crate::models::HierarchyOps::new(&hierarchy);
    let template = hierarchy.template();
    let h = ckpt.config.model.bottleneck;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = sample_model_latents(&ckpt.model, count, h, &mut rng);

    let expression = expression_path
        .map(|p| {
            let e = Checkpoint::load(p)?;
            e.verify_hierarchy(&ckpt.hierarchy_checksum)?;
            Ok::<_, CliError>(e)
        })
        .transpose()?;
    let expr_latents = expression
        .as_ref()
        .map(|e| sample_model_latents(&e.model, count, e.config.model.bottleneck, &mut rng));

    for i in 0..count {
        let identity = to_vertices(
            template,
            &decode_latent(&ops, generator_of(&ckpt.model), &latents[i]),
            ckpt.sigma,
        );
        let vertices = match (&expression, &expr_latents) {
            (Some(e), Some(zs)) => {
                let expr_mesh = to_vertices(
                    template,
                    &decode_latent(&ops, generator_of(&e.model), &zs[i]),
                    e.sigma,
                );
                eval::compose_identity_expression(&identity, &expr_mesh, template)?
            }
            _ => identity,
        };
        let mesh = template.with_vertices(vertices)?;
        save_mesh(&mesh, run_dir.join(format!("generated_{i:04}.obj")))?;
    }
    write_echo(
        run_dir,
        config,
        &[
            ctx("command", "generate"),
            ctx("checkpoint", checkpoint_path.display()),
            ctx("hierarchy", hierarchy_path.display()),
            ctx("count", count),
            ctx("seed", seed),
            ctx(
                "expression_checkpoint",
                expression_path.map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
            ),
        ],
    )?;
    log.info(format!("wrote {count} meshes to {}", run_dir.display()));
    Ok(())
}

fn parse_metric_list(metrics: &str) -> Result<Vec<&str>, CliError> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for m in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match m {
            "gen" | "spec" | "fid" => out.push(m),
            other => bad.push(other.to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Usage(format!(
            "unknown metrics [{}]; choose from gen, spec, fid",
            bad.join(", ")
        )));
    }
    if out.is_empty() {
        return Err(CliError::Usage("no metrics requested".into()));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    config: &RunConfig,
    checkpoint_path: &Path,
    hierarchy_path: &Path,
    dataset_dir: &Path,
    subset: Subset,
    metrics: &str,
    seed: u64,
    run_dir: &Path,
    log: &Logger,
) -> Result<(), CliError> {
    let wanted = parse_metric_list(metrics)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let hierarchy = load_consistent_hierarchy(hierarchy_path, &ckpt)?;
    let dataset = synthdata::load_dataset(dataset_dir)?;
    check_template_consistency(&dataset, &hierarchy)?;
    let ops = crate::models::HierarchyOps::new(&hierarchy);
    let template = hierarchy.template();
    let train_meshes = split_meshes(&dataset, subset, true)?;
    let test_meshes = split_meshes(&dataset, subset, false)?;
    let model_id = format!(
        "{}-{}",
        match ckpt.model {
            TrainedModel::Began { .. } => "began",
            TrainedModel::Autoencoder { .. } => "ae",
        },
        subset.name()
    );

    let mut lines = Vec::new();
    let mut table = Vec::new();
    for metric in wanted {
        match metric {
            "gen" => {
                let opts = InvertOptions {
                    restarts: config.eval.invert_restarts,
                    iterations: config.eval.invert_iterations,
                    lr: config.eval.invert_lr,
                    box_project: matches!(ckpt.model, TrainedModel::Began { .. }),
                    seed,
                };
                let report = eval::generalisation(
                    &ops, &ckpt.model, template, ckpt.sigma, &test_meshes, &opts, &model_id,
                )?;
                table.push(format!(
                    "generalisation  {:>10.4} ± {:.4} mm over {} meshes",
                    report.mean, report.std, report.sample_count
                ));
                lines.push(report.to_json());
            }
            "spec" => {
                let report = eval::specificity(
                    &ops,
                    &ckpt.model,
                    template,
                    ckpt.sigma,
                    &test_meshes,
                    &train_meshes,
                    config.eval.specificity_samples,
                    seed,
                    &model_id,
                )?;
                table.push(format!(
                    "specificity     {:>10.4} ± {:.4} mm over {} draws",
                    report.mean, report.std, report.sample_count
                ));
                lines.push(report.to_json());
            }
            "fid" => {
                let op = hierarchy.operator(0);
                let basis = op.eigendecomposition(config.eval.feature_count)?;
                let real: Vec<Array2<f64>> = test_meshes
                    .iter()
                    .map(|m| m.vertices() - template.vertices())
                    .collect();
                let h = ckpt.config.model.bottleneck;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
                let generated: Vec<Array2<f64>> =
                    sample_model_latents(&ckpt.model, config.eval.fid_samples, h, &mut rng)
                        .iter()
                        .map(|z| {
                            &decode_latent(&ops, generator_of(&ckpt.model), z) * ckpt.sigma
                        })
                        .collect();
                let value = fid_score(&real, &generated, &basis, config.eval.feature_count)?;
                table.push(format!("fid             {value:>10.4}"));
                lines.push(
                    serde_json::json!({
                        "metric": "fid",
                        "model_id": model_id,
                        "real_count": real.len(),
                        "generated_count": generated.len(),
                        "seed": seed,
                        "value": value,
                    })
                    .to_string(),
                );
            }
            _ => unreachable!("validated above"),
        }
    }

    let report_path = run_dir.join("metrics.jsonl");
    std::fs::write(&report_path, lines.join("\n") + "\n")
        .map_err(|e| io_data(&report_path, e))?;
    write_echo(
        run_dir,
        config,
        &[
            ctx("command", "evaluate"),
            ctx("checkpoint", checkpoint_path.display()),
            ctx("hierarchy", hierarchy_path.display()),
            ctx("dataset", dataset_dir.display()),
            ctx("subset", subset.name()),
            ctx("metrics", metrics),
            ctx("seed", seed),
        ],
    )?;
    println!("model {model_id}");
    for row in &table {
        println!("  {row}");
    }
    log.info(format!("metric reports written to {}", report_path.display()));
    Ok(())
}

/// The anchor's latent: encoded for an autoencoder, inverted for the
/// adversarial generator.
fn anchor_latent(
    ops: &crate::models::HierarchyOps,
    ckpt: &Checkpoint,
    template: &Mesh,
    mesh: &Mesh,
    eval_settings: &EvalSettings,
    seed: u64,
) -> Result<Array2<f64>, CliError> {
    let signal = to_signal(template, mesh.vertices(), ckpt.sigma);
    match &ckpt.model {
        TrainedModel::Autoencoder { model } => Ok(eval::encode_signal(ops, model, &signal)),
        TrainedModel::Began { generator, .. } => {
            let opts = InvertOptions {
                restarts: eval_settings.invert_restarts,
                iterations: eval_settings.invert_iterations,
                lr: eval_settings.invert_lr,
                box_project: true,
                seed,
            };
            let (z, residual) = eval::invert_latent(ops, generator, &signal, &opts)?;
            if !residual.is_finite() {
                return Err(CliError::Numerical("latent inversion diverged".into()));
            }
            Ok(z)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpolate(
    config: &RunConfig,
    checkpoint_path: &Path,
    hierarchy_path: &Path,
    anchor_a: &Path,
    anchor_b: &Path,
    grid: &str,
    seed: u64,
    expression_path: Option<&Path>,
    expression_anchor_a: Option<&Path>,
    expression_anchor_b: Option<&Path>,
    expression_grid: Option<&str>,
    run_dir: &Path,
    log: &Logger,
) -> Result<(), CliError> {
    let fs = parse_grid(grid)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let hierarchy = load_consistent_hierarchy(hierarchy_path, &ckpt)?;
    let ops = crate::models::HierarchyOps::new(&hierarchy);
    let template = hierarchy.template();
    let mesh_a = load_mesh(anchor_a)?;
    let mesh_b = load_mesh(anchor_b)?;
    let z1 = anchor_latent(&ops, &ckpt, template, &mesh_a, &config.eval, seed)?;
    let z2 = anchor_latent(&ops, &ckpt, template, &mesh_b, &config.eval, seed)?;

    let mut context = vec![
        ctx("command", "interpolate"),
        ctx("checkpoint", checkpoint_path.display()),
        ctx("hierarchy", hierarchy_path.display()),
        ctx("anchor_a", anchor_a.display()),
        ctx("anchor_b", anchor_b.display()),
        ctx("grid", grid),
        ctx("seed", seed),
    ];

    match expression_path {
        None => {
            let mut listing = Vec::new();
            for (i, &f) in fs.iter().enumerate() {
                let z = eval::mix_latent(&z1, &z2, f)?;
                let vertices = to_vertices(
                    template,
                    &decode_latent(&ops, generator_of(&ckpt.model), &z),
                    ckpt.sigma,
                );
                let name = format!("interp_{i:04}.obj");
                save_mesh(&template.with_vertices(vertices)?, run_dir.join(&name))?;
                listing.push(serde_json::json!({ "file": name, "f": f }));
            }
            let index_path = run_dir.join("grid.json");
            std::fs::write(
                &index_path,
                serde_json::to_string_pretty(&listing).expect("grid index serializes") + "\n",
            )
            .map_err(|e| io_data(&index_path, e))?;
            log.info(format!("wrote {} interpolated meshes", fs.len()));
        }
        Some(expr_path) => {
            let (ea, eb) = match (expression_anchor_a, expression_anchor_b) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(CliError::Usage(
                        "--expression needs --expression-anchor-a and --expression-anchor-b".into(),
                    ))
                }
            };
            let expr_ckpt = Checkpoint::load(expr_path)?;
            expr_ckpt.verify_hierarchy(&ckpt.hierarchy_checksum)?;
            let expr_fs = match expression_grid {
                Some(g) => parse_grid(g)?,
                None => fs.clone(),
            };
            let e1 =
                anchor_latent(&ops, &expr_ckpt, template, &load_mesh(ea)?, &config.eval, seed)?;
            let e2 =
                anchor_latent(&ops, &expr_ckpt, template, &load_mesh(eb)?, &config.eval, seed)?;
            let mut listing = Vec::new();
            for (i, &f_id) in fs.iter().enumerate() {
                let z = eval::mix_latent(&z1, &z2, f_id)?;
                let identity = to_vertices(
                    template,
                    &decode_latent(&ops, generator_of(&ckpt.model), &z),
                    ckpt.sigma,
                );
                for (j, &f_expr) in expr_fs.iter().enumerate() {
                    let e = eval::mix_latent(&e1, &e2, f_expr)?;
                    let expr_mesh = to_vertices(
                        template,
                        &decode_latent(&ops, generator_of(&expr_ckpt.model), &e),
                        expr_ckpt.sigma,
                    );
                    let vertices =
                        eval::compose_identity_expression(&identity, &expr_mesh, template)?;
                    let name = format!("interp_{i:02}_{j:02}.obj");
                    save_mesh(&template.with_vertices(vertices)?, run_dir.join(&name))?;
                    listing.push(
                        serde_json::json!({ "file": name, "f_id": f_id, "f_expr": f_expr }),
                    );
                }
            }
            let index_path = run_dir.join("grid.json");
            std::fs::write(
                &index_path,
                serde_json::to_string_pretty(&listing).expect("grid index serializes") + "\n",
            )
            .map_err(|e| io_data(&index_path, e))?;
            context.push(ctx("expression_checkpoint", expr_path.display()));
            context.push(ctx("expression_grid", expression_grid.unwrap_or(grid)));
            log.info(format!(
                "wrote a {} x {} composed interpolation grid",
                fs.len(),
                expr_fs.len()
            ));
        }
    }
    write_echo(run_dir, config, &context)?;
    Ok(())
}

/// Binary entry: parse, run, and translate clap failures to exit 1.
pub fn main() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            // clap help/version output exits 0; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
