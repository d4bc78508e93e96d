//! Pipeline stages behind the `semiseg` binary. Each subcommand reads one
//! JSON config, validates it before doing any work and writes into a single
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semiseg::io_util::{create_dir, write_json};
use semiseg::metrics::{MetricReport, METRIC_COLUMNS};
use semiseg::pggan::{load_pggan, synthesize, train_pggan, write_synthetic, GrowthSchedule, PgganConfig};
use semiseg::trainer::{evaluate_cases, load_segnet, run_experiment, Dataset, ExperimentSpec, RunOptions, TrainConfig};
use semiseg::voldata::{
    generate_dataset, read_case, read_manifest, write_manifest, DatasetSpec, IntensityWindow, Split,
};

pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] semiseg::Error),
    #[error("{}: invalid config at `{path}`: {message}", file.display())]
    Schema {
        file: PathBuf,
        path: String,
        message: String,
    },
    #[error("{} exists and is not empty; pass --force to overwrite", .0.display())]
    OutputExists(PathBuf),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Schema { .. } => "config",
            CliError::OutputExists(_) => "output_exists",
            CliError::Usage(_) => "usage",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Schema { path, .. } => v["path"] = path.clone().into(),
            CliError::Core(semiseg::Error::Config { path, .. }) => v["path"] = path.clone().into(),
            CliError::Core(semiseg::Error::Diverged {
                iteration,
                last_checkpoint,
            }) => {
                v["iteration"] = (*iteration).into();
                v["last_checkpoint"] = last_checkpoint.as_ref().map(|p| p.display().to_string()).into();
            }
            _ => {}
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "semiseg", version, about = "Semi-supervised 3D CT segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, value_enum, default_value_t = Verbosity::Info)]
    pub verbosity: Verbosity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Verbosity {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl Verbosity {
    pub fn level(self) -> log::LevelFilter {
        match self {
            Verbosity::Error => log::LevelFilter::Error,
            Verbosity::Warn => log::LevelFilter::Warn,
            Verbosity::Info => log::LevelFilter::Info,
            Verbosity::Debug => log::LevelFilter::Debug,
            Verbosity::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config for this stage.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData(Common),
    /// Train the progressive volume generator.
    TrainPggan(Common),
    /// Sample synthetic volumes into an existing dataset (`--out` is the
    /// dataset root).
    Synth(Common),
    /// Train one segmentation experiment.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit once this many iterations are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a segmentation checkpoint.
    Evaluate(Common),
    /// Merge run reports into one comparison table.
    Report {
        /// Run directories, one table row each.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse a config file, reporting the key path of schema violations.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| semiseg::Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::Schema {
        file: path.to_path_buf(),
        path: match e.path().to_string() {
            p if p == "." => "<root>".into(),
            p => p,
        },
        message: e.inner().to_string(),
    })
}

/// Resolve `p` against the directory holding the config file.
fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

/// Refuse a non-empty output directory unless forced, in which case it is
/// cleared.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(out) {
        if !force {
            return Err(CliError::OutputExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(|e| semiseg::Error::io(out, e))?;
    }
    create_dir(out)?;
    Ok(())
}

fn copy_config(config: &Path, out: &Path) -> Result<()> {
    let dst = out.join("config.json");
    fs::copy(config, &dst).map_err(|e| semiseg::Error::io(&dst, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgganRunConfig {
    pub dataset: PathBuf,
    /// Training volumes; all train-split cases of the dataset when absent.
    #[serde(default)]
    pub cases: Option<Vec<String>>,
    #[serde(default = "GrowthSchedule::desk")]
    pub schedule: GrowthSchedule,
    #[serde(default)]
    pub pggan: PgganConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Directory of a final-stage PGGAN checkpoint.
    pub checkpoint: PathBuf,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub window: IntensityWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory of a segmentation checkpoint.
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Cases to score; the dataset's test split when absent.
    #[serde(default)]
    pub cases: Option<Vec<String>>,
}

pub fn gen_data(c: &Common) -> Result<()> {
    let mut spec: DatasetSpec = load_config(&c.config)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    spec.validate()?;
    prepare_out(&c.out, c.force)?;
    let m = generate_dataset(&c.out, &spec)?;
    log::info!("wrote {} cases to {}", m.cases.len(), c.out.display());
    Ok(())
}

pub fn train_pggan_cmd(c: &Common) -> Result<()> {
    let mut cfg: PgganRunConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.pggan.validate(&cfg.schedule)?;
    let root = resolve(&c.config, &cfg.dataset);
    let manifest = read_manifest(&root)?;
    let ids = cfg
        .cases
        .clone()
        .unwrap_or_else(|| manifest.ids_where(|e| e.split == Split::Train));
    let mut vols = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = manifest
            .find(id)
            .ok_or_else(|| CliError::Usage(format!("case `{id}` is not in {}", root.display())))?;
        vols.push(read_case(&root.join(&entry.path))?.1);
    }
    prepare_out(&c.out, c.force)?;
    copy_config(&c.config, &c.out)?;
    train_pggan(&vols, &cfg.schedule, &cfg.pggan, cfg.seed, Some(&c.out))?;
    Ok(())
}

pub fn synth(c: &Common) -> Result<()> {
    let mut cfg: SynthConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let root = &c.out;
    let mut manifest = read_manifest(root)?;
    let existing = manifest.ids_where(|e| e.id.starts_with("synth_"));
    if !existing.is_empty() {
        if !c.force {
            return Err(CliError::OutputExists(root.join(&existing[0])));
        }
        manifest.cases.retain(|e| !e.id.starts_with("synth_"));
        for id in &existing {
            let dir = root.join(id);
            fs::remove_dir_all(&dir).map_err(|e| semiseg::Error::io(&dir, e))?;
        }
    }
    let (g, _) = load_pggan(&resolve(&c.config, &cfg.checkpoint))?;
    let vols = synthesize(&g, cfg.count, cfg.seed)?;
    let entries = write_synthetic(root, &vols, cfg.seed, cfg.window)?;
    log::info!("added {} synthetic cases to {}", entries.len(), root.display());
    manifest.cases.extend(entries);
    write_manifest(root, &manifest)?;
    Ok(())
}

pub fn train_seg(c: &Common, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let dataset = cfg
        .dataset
        .as_ref()
        .map(|p| resolve(&c.config, p))
        .ok_or_else(|| CliError::Schema {
            file: c.config.clone(),
            path: "dataset".into(),
            message: "a dataset root is required".into(),
        })?;
    // The checkpoint stores the original config, so keep paths as written.
    cfg.validate()?;
    if !resume {
        prepare_out(&c.out, c.force)?;
    } else {
        create_dir(&c.out)?;
    }
    copy_config(&c.config, &c.out)?;
    let data = Dataset::load(&dataset, &cfg.experiment)?;
    let run = run_experiment(
        &cfg,
        &data,
        Some(&c.out),
        &RunOptions {
            resume,
            stop_after,
        },
    )?;
    if let Some(r) = run.report {
        log::info!("test mean DSC {:.4}", r.mean_dsc());
    }
    Ok(())
}

/// Case IDs the experiment needs, used by `evaluate` to load test cases.
fn eval_spec(ids: Vec<String>) -> ExperimentSpec {
    ExperimentSpec {
        variant: semiseg::trainer::Variant::ResUnet,
        labeled_cases: Vec::new(),
        unlabeled_cases: Vec::new(),
        validation_cases: Vec::new(),
        test_cases: ids,
    }
}

pub fn evaluate(c: &Common) -> Result<()> {
    let cfg: EvalConfig = load_config(&c.config)?;
    let root = resolve(&c.config, &cfg.dataset);
    let ids = match cfg.cases.clone() {
        Some(ids) => ids,
        None => read_manifest(&root)?.ids_where(|e| e.split == Split::Test),
    };
    if ids.is_empty() {
        return Err(CliError::Usage("no cases to evaluate".into()));
    }
    let s = load_segnet(&resolve(&c.config, &cfg.checkpoint))?;
    let data = Dataset::load(&root, &eval_spec(ids))?;
    prepare_out(&c.out, c.force)?;
    copy_config(&c.config, &c.out)?;
    let rep = evaluate_cases(&s, &data.test)?;
    rep.save(&c.out, "report")?;
    log::info!("mean DSC {:.4} over {} cases", rep.mean_dsc(), rep.cases.len());
    Ok(())
}

pub fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<()> {
    let table = report::ComparisonTable::from_runs(runs);
    create_dir(out)?;
    write_json(&out.join("comparison.json"), &table)?;
    let path = out.join("comparison.csv");
    let f = fs::File::create(&path).map_err(|e| semiseg::Error::io(&path, e))?;
    table.write_csv(f)?;
    Ok(())
}

/// Execute one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::TrainPggan(c) => train_pggan_cmd(c),
        Command::Synth(c) => synth(c),
        Command::TrainSeg {
            common,
            resume,
            stop_after,
        } => train_seg(common, *resume, *stop_after),
        Command::Evaluate(c) => evaluate(c),
        Command::Report { runs, out } => report_cmd(runs, out),
    }
}

/// Load a run directory's test report.
pub fn load_run_report(dir: &Path) -> Option<MetricReport> {
    MetricReport::load(&dir.join("report.json")).ok()
}

/// `<organ>_<metric>` columns in report order.
pub fn metric_columns(organs: &[String]) -> Vec<String> {
    organs
        .iter()
        .flat_map(|o| METRIC_COLUMNS.iter().map(move |m| format!("{o}_{m}")))
        .collect()
}
