//! `debias` command-line pipeline: stats, recalibrate, render, update.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 I/O error.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use debias_core::{Error, RsTable, Snapshot};
use serde::Serialize;

use crate::commands::*;
use crate::config::PipelineConfig;
use crate::manifest::{Manifest, Status, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "debias", version, about = "Dataset bias diagnosis, layout recalibration and blueprint rendering")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON pipeline config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level RNG seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for recalibration and rendering
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the plan and write nothing
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Default, Args)]
pub struct InputArgs {
    /// COCO-style annotation file
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Per-instance embeddings (JSON Lines of {instance_id, embedding})
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Image directory used for fallback descriptors
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Weight of context diversity in the score (default 0.5)
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct RecalibArgs {
    /// Seed layouts (JSON Lines); defaults to the dataset's images
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Debias strength; 0 samples uniformly (default 1)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Smoothing added to every score (default 0.01)
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Preference for classes already in the layout (default 2)
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Vertical jitter std in pixels (default 5% of image height)
    #[arg(long)]
    pub sigma_y: Option<f64>,
    /// Upper bound on injected objects per layout (default 2)
    #[arg(long)]
    pub max_new_instances: Option<usize>,
    /// Fraction of seed objects moved (default 0.5)
    #[arg(long)]
    pub recalib_fraction: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct BlueprintArgs {
    /// Box opacity in (0, 1] (default 0.8)
    #[arg(long)]
    pub fill_alpha: Option<f64>,
    /// HSV value decrement per repeated instance (default 0.1)
    #[arg(long)]
    pub value_step: Option<f64>,
    /// Lowest HSV value for instance colours (default 0.5)
    #[arg(long)]
    pub value_min: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct DynamicsArgs {
    /// Detection-error stream (JSON Lines)
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// EMA momentum in [0, 1] (default 0.99)
    #[arg(long)]
    pub mu: Option<f64>,
    /// Divisor applied to every loss (default 1)
    #[arg(long)]
    pub loss_scale: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every data group and write the bias report
    Stats {
        #[command(flatten)]
        input: InputArgs,
        /// Also write histogram images
        #[arg(long)]
        plots: bool,
    },
    /// Resample seed layouts against a score table
    Recalibrate {
        #[command(flatten)]
        input: InputArgs,
        /// Score table (default: <out>/rs_table.json)
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        recalib: RecalibArgs,
    },
    /// Render layouts into blueprint PNGs
    Render {
        #[command(flatten)]
        input: InputArgs,
        /// Layouts to render (default: <out>/layouts.jsonl)
        #[arg(long)]
        layouts: Option<PathBuf>,
        /// Palette size; otherwise taken from the annotations
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value = "recalibrated")]
        variant: String,
        #[command(flatten)]
        blueprint: BlueprintArgs,
    },
    /// Refine a score table from detection errors
    Update {
        /// Score table or snapshot (default: <out>/rs_table.json)
        #[arg(long)]
        table: Option<PathBuf>,
        /// Refuse tables built from a dataset with another digest
        #[arg(long)]
        expect_digest: Option<String>,
        #[command(flatten)]
        dynamics: DynamicsArgs,
    },
    /// stats, recalibrate, render and, given an error stream, update
    Pipeline {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        recalib: RecalibArgs,
        #[command(flatten)]
        blueprint: BlueprintArgs,
        #[command(flatten)]
        dynamics: DynamicsArgs,
        /// Also write histogram images
        #[arg(long)]
        plots: bool,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 1,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> debias_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

impl InputArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set_path(&mut cfg.paths.annotations, &self.annotations);
        set_path(&mut cfg.paths.embeddings, &self.embeddings);
        set_path(&mut cfg.paths.images, &self.images);
        set(&mut cfg.beta, self.beta);
    }
}

impl RecalibArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set_path(&mut cfg.paths.seeds, &self.seeds);
        let r = &mut cfg.recalib;
        set(&mut r.tau, self.tau);
        set(&mut r.epsilon, self.epsilon);
        set(&mut r.kappa, self.kappa);
        if self.sigma_y.is_some() {
            r.sigma_y = self.sigma_y;
        }
        set(&mut r.max_new_instances, self.max_new_instances);
        set(&mut r.recalib_fraction, self.recalib_fraction);
    }
}

impl BlueprintArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let b = &mut cfg.blueprint;
        set(&mut b.fill_alpha, self.fill_alpha);
        set(&mut b.value_step, self.value_step);
        set(&mut b.value_min, self.value_min);
    }
}

impl DynamicsArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set_path(&mut cfg.paths.errors, &self.errors);
        set(&mut cfg.dynamics.mu, self.mu);
        set(&mut cfg.dynamics.loss_scale, self.loss_scale);
    }
}

/// Effective configuration: config file (or defaults), then flags.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let c = &cli.common;
    if let Some(seed) = c.seed {
        cfg.recalib.rng_seed = seed;
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    set(&mut cfg.paths.out, c.out.clone());
    match &cli.command {
        Command::Stats { input, plots } => {
            input.apply(&mut cfg);
            cfg.report.plots |= plots;
        }
        Command::Recalibrate { input, recalib, .. } => {
            input.apply(&mut cfg);
            recalib.apply(&mut cfg);
        }
        Command::Render { input, blueprint, .. } => {
            input.apply(&mut cfg);
            blueprint.apply(&mut cfg);
        }
        Command::Update { dynamics, .. } => dynamics.apply(&mut cfg),
        Command::Pipeline {
            input,
            recalib,
            blueprint,
            dynamics,
            plots,
        } => {
            input.apply(&mut cfg);
            recalib.apply(&mut cfg);
            blueprint.apply(&mut cfg);
            dynamics.apply(&mut cfg);
            cfg.report.plots |= plots;
        }
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Human-readable list of the stages a command would run and the files they
/// would write.
pub fn plan(cli: &Cli, cfg: &PipelineConfig) -> Vec<String> {
    let out = &cfg.paths.out;
    let f = |name: &str| out.join(name).display().to_string();
    let stats = format!("stats: {} -> {}, {}, {}", show(&cfg.paths.annotations), f(RS_TABLE), f(BIAS_REPORT), f(GROUPS));
    let recal = format!("recalibrate: seed {} -> {}, {}", cfg.recalib.rng_seed, f(LAYOUTS), f(LAYOUTS_META));
    let render = format!("render -> {}/<image_id>_<variant>.png, {}", f(BLUEPRINT_DIR), f(BLUEPRINT_INDEX));
    let update = format!("update: {} -> {}, {}", show(&cfg.paths.errors), f(SNAPSHOT), f(UPDATE_REPORT));
    let mut steps = match &cli.command {
        Command::Stats { .. } => vec![stats],
        Command::Recalibrate { .. } => vec![recal],
        Command::Render { .. } => vec![render],
        Command::Update { .. } => vec![update],
        Command::Pipeline { .. } => {
            let mut v = vec![stats, recal, render];
            if cfg.paths.errors.is_some() {
                v.push(update);
            }
            v.push(format!("manifest -> {}", f(MANIFEST_FILE)));
            v
        }
    };
    steps.insert(0, format!("config digest {}", cfg.digest()));
    steps
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "<unset>".to_string(), |p| p.display().to_string())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    if cli.common.dry_run {
        for line in plan(cli, &cfg) {
            println!("{line}");
        }
        return Ok(());
    }
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?
            .install(|| dispatch(cli, &cfg)),
        None => dispatch(cli, &cfg),
    }
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = &cfg.paths.out;
    match &cli.command {
        Command::Stats { .. } => {
            let s = stats(cfg)?;
            println!(
                "{} images, {} instances, {} groups -> {}",
                s.report.images,
                s.report.total_instances,
                s.table.groups().count(),
                out.display()
            );
        }
        Command::Recalibrate { table, .. } => {
            let ds = load_dataset(cfg)?;
            let table = RsTable::read(table.clone().unwrap_or_else(|| out.join(RS_TABLE)))?;
            let r = recalibrate(cfg, &ds, &table)?;
            println!(
                "{} layouts from {} seeds, {} placement failures, {} degenerate",
                r.meta.layouts,
                r.meta.seeds,
                r.meta.placement_failures,
                r.meta.degenerate.len()
            );
        }
        Command::Render {
            layouts,
            num_classes,
            variant,
            ..
        } => {
            let n = match num_classes {
                Some(n) => *n,
                None => load_dataset(cfg)
                    .map_err(|e| match e {
                        Error::InvalidArgument(_) => {
                            CliError::Usage("render needs --num-classes or an annotation file".into())
                        }
                        e => e.into(),
                    })?
                    .num_classes(),
            };
            let layouts = read_layout_file(&layouts.clone().unwrap_or_else(|| out.join(LAYOUTS)))?;
            let r = render(cfg, &layouts, n, variant)?;
            println!("{} blueprints, {} failures", r.index.len(), r.failures.len());
        }
        Command::Update {
            table,
            expect_digest,
            ..
        } => {
            let snap = read_snapshot(&table.clone().unwrap_or_else(|| out.join(RS_TABLE)), cfg.dynamics.mu)?;
            let (_, s) = update(cfg, snap, expect_digest.as_deref())?;
            println!("{} records applied, {} rejected", s.report.applied, s.report.rejected);
        }
        Command::Pipeline { .. } => {
            let m = pipeline(cfg)?;
            println!("{} stages complete -> {}", m.stages_completed.len(), out.join(MANIFEST_FILE).display());
        }
    }
    Ok(())
}

/// Runs every stage, rewriting the manifest after each one so an interrupted
/// run is visible as `partial`.
pub fn pipeline(cfg: &PipelineConfig) -> Result<Manifest, CliError> {
    let out = cfg.paths.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut m = Manifest::new(cfg);
    m.write(out)?;

    let s = stats(cfg)?;
    m.outputs.push(Manifest::artifact(out, "rs_table", RS_TABLE)?);
    m.outputs.push(Manifest::artifact(out, "bias_report", BIAS_REPORT)?);
    for f in s.files.iter().filter(|f| *f != RS_TABLE && *f != BIAS_REPORT) {
        m.auxiliary.push(Manifest::artifact(out, f, f)?);
    }
    m.stages_completed.push("stats".into());
    m.write(out)?;

    let r = recalibrate(cfg, &s.dataset, &s.table)?;
    m.outputs.push(Manifest::artifact(out, "layouts", LAYOUTS)?);
    m.auxiliary.push(Manifest::artifact(out, LAYOUTS_META, LAYOUTS_META)?);
    m.stages_completed.push("recalibrate".into());
    m.write(out)?;

    render(cfg, &r.layouts, s.dataset.num_classes(), "recalibrated")?;
    m.outputs.push(Manifest::artifact(out, "blueprint_index", BLUEPRINT_INDEX)?);
    m.stages_completed.push("render".into());
    m.write(out)?;

    if cfg.paths.errors.is_some() {
        let snap = Snapshot::new(s.table, cfg.dynamics.mu);
        update(cfg, snap, Some(&s.dataset.digest()))?;
        m.outputs.push(Manifest::artifact(out, "rs_snapshot", SNAPSHOT)?);
        m.outputs.push(Manifest::artifact(out, "update_report", UPDATE_REPORT)?);
        m.stages_completed.push("update".into());
    }
    m.status = Status::Complete;
    m.write(out)?;
    Ok(m)
}

/// Parses `args`, runs the command and returns the process exit code.
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
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
