//! Command-line front end: `gen-data`, `train`, `eval`, `oracle`, `render`
//! and `report`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{self, BaseMode, EvalConfig, EvalReport, Strategy};
use crate::model::{self, FusionMode, ModelConfig};
use crate::render;
use crate::shapes::{self, DatasetConfig, Manifest, ShapeClass, MANIFEST_FILE};
use crate::train::{self, BasePolicy, TrainConfig};
use crate::viewsphere::ViewSphere;
use crate::voxelgrid;

pub const CONFIG_FILE: &str = "config.json";

/// Every module config in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: DatasetConfig,
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            data_dir: PathBuf::from("data"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            eval_dir: PathBuf::from("eval"),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    fn write_next_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nvs3d",
    version,
    about = "Next-best-view selection with voxel reconstruction"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural dataset (grids and manifest).
    GenData(GenDataArgs),
    /// Train a model and write checkpoint and step log.
    Train(TrainArgs),
    /// Evaluate selection strategies on the test split.
    Eval(EvalArgs),
    /// Per-sample oracle choices with every candidate IoU.
    Oracle(EvalArgs),
    /// Dump the rendered views of one grid as PPM images.
    Render(RenderArgs),
    /// Merge several eval reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<ShapeClass>>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Voxel resolution; decoder stages follow it.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub include_base_in_candidates: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub base_policy: Option<BasePolicy>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// `fixed:<id>` or `sweep`.
    #[arg(long)]
    pub base: Option<BaseMode>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A `.vxg` grid file.
    #[arg(long, conflicts_with = "sample")]
    pub grid: Option<PathBuf>,
    /// Sample id looked up in the manifest.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` files; labels are their parent directory names.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

fn set_resolution(cfg: &mut CliConfig, r: usize) {
    cfg.model.resolution = r;
    cfg.model.decoder_channels = ModelConfig::for_resolution(r).decoder_channels;
}

fn apply_model(cfg: &mut CliConfig, args: &ModelArgs) -> Result<()> {
    if let Some(r) = args.resolution {
        set_resolution(cfg, r);
    }
    if let Some(s) = args.image_size {
        cfg.model.image_size = s;
    }
    if let Some(f) = &args.fusion {
        cfg.model.fusion =
            parse_fusion(f).ok_or_else(|| anyhow::anyhow!("unknown fusion mode '{f}'"))?;
    }
    if let Some(b) = args.include_base_in_candidates {
        cfg.model.include_base_in_candidates = b;
    }
    Ok(())
}

fn apply_eval(cfg: &mut CliConfig, args: &EvalArgs, out: Option<&PathBuf>) -> Result<()> {
    apply_model(cfg, &args.model)?;
    if let Some(m) = &args.manifest {
        cfg.train.manifest = m.clone();
    }
    if let Some(c) = &args.checkpoint {
        cfg.train.checkpoint = c.clone();
    }
    if let Some(list) = &args.strategies {
        cfg.eval.strategies = list
            .iter()
            .map(|s| s.parse::<Strategy>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(b) = args.base {
        cfg.eval.base = b;
    }
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(o) = out {
        cfg.eval_dir = o.clone();
    }
    Ok(())
}

/// Resolves the config of one invocation: defaults, then `--config`, then
/// flags.
pub fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    let out = cli.common.out.as_ref();
    match &cli.command {
        Command::GenData(a) => {
            if let Some(c) = &a.classes {
                cfg.data.classes = c.clone();
            }
            if let Some(n) = a.samples_per_class {
                cfg.data.samples_per_class = n;
            }
            if let Some(f) = a.train_fraction {
                cfg.data.train_fraction = f;
            }
            if let Some(r) = a.resolution {
                cfg.data.resolution = r;
                set_resolution(&mut cfg, r);
            }
            if let Some(o) = out {
                cfg.data_dir = o.clone();
                cfg.train.manifest = o.join(MANIFEST_FILE);
            }
        }
        Command::Train(a) => {
            apply_model(&mut cfg, &a.model)?;
            if let Some(m) = &a.manifest {
                cfg.train.manifest = m.clone();
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(p) = a.base_policy {
                cfg.train.base_policy = p;
            }
            if let Some(aug) = a.augment {
                cfg.train.augment = aug;
            }
            if a.resume {
                cfg.train.resume = true;
            }
            if let Some(o) = out {
                cfg.train.checkpoint = o.join("model.nvsm");
                cfg.train.log = o.join("train.log");
            }
        }
        Command::Eval(a) | Command::Oracle(a) => apply_eval(&mut cfg, a, out)?,
        Command::Render(a) => {
            if let Some(m) = &a.manifest {
                cfg.train.manifest = m.clone();
            }
            if let Some(s) = a.image_size {
                cfg.model.image_size = s;
            }
        }
        Command::Report(_) => {}
    }
    Ok(cfg)
}

fn check_resolution(manifest_path: &Path, cfg: &ModelConfig) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.resolution != cfg.resolution {
        bail!(
            "manifest resolution {} differs from model resolution {}",
            manifest.resolution,
            cfg.resolution
        );
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub sample_id: String,
    pub class: String,
    pub base: usize,
    pub choice: usize,
    pub iou: f64,
    pub candidate_ious: Vec<f64>,
}

fn oracle_records(cfg: &CliConfig) -> Result<Vec<OracleRecord>> {
    check_resolution(&cfg.train.manifest, &cfg.model)?;
    let (mut model, _) = model::load_checkpoint(&cfg.train.checkpoint, &cfg.model)?;
    model.set_behaviour(cfg.model.fusion, cfg.model.include_base_in_candidates);
    let samples = eval::load_test_samples(&cfg.train.manifest, &cfg.model)?;
    let bases: Vec<usize> = match cfg.eval.base {
        BaseMode::Fixed(id) => vec![id],
        BaseMode::Sweep => (0..cfg.model.views).collect(),
    };
    let threshold = cfg.eval.threshold as f32;
    let per_sample: Vec<Result<Vec<OracleRecord>>> = samples
        .par_iter()
        .map(|s| {
            let mut out = Vec::new();
            for &base in &bases {
                let (_, vols) = model.candidate_volumes(&s.views, base)?;
                let ious = vols
                    .iter()
                    .map(|v| voxelgrid::iou(v, &s.truth, threshold))
                    .collect::<Result<Vec<f64>, _>>()?;
                let avail: Vec<bool> = (0..ious.len())
                    .map(|v| cfg.model.include_base_in_candidates || v != base)
                    .collect();
                let choice = crate::viewsphere::masked_argmax(&ious, &avail)?;
                out.push(OracleRecord {
                    sample_id: s.sample_id.clone(),
                    class: s.class.to_string(),
                    base,
                    choice,
                    iou: ious[choice],
                    candidate_ious: ious,
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    Ok(records)
}

fn run_render(cfg: &CliConfig, args: &RenderArgs, out: &Path) -> Result<()> {
    let grid = match (&args.grid, &args.sample) {
        (Some(path), _) => voxelgrid::read_grid(path)?.into_binary(voxelgrid::DEFAULT_THRESHOLD)?,
        (None, Some(id)) => {
            let manifest = Manifest::load(&cfg.train.manifest)?;
            shapes::load_grid(&parent_dir(&cfg.train.manifest), manifest.entry(id)?)?
        }
        (None, None) => bail!("render needs --grid or --sample"),
    };
    let sphere = ViewSphere::canonical();
    let images = render::render_all(&grid, &sphere, cfg.model.image_size)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, img) in images.iter().enumerate() {
        let path = out.join(format!("view_{i:02}.ppm"));
        img.write_ppm(&path)?;
        if std::fs::read(&path)? != img.to_ppm() {
            bail!("{}: read-back mismatch", path.display());
        }
    }
    Ok(())
}

/// Ranking curve as CSV and, when both learned ranks were evaluated, the
/// best/second-best selection histograms.
fn write_analysis(report: &EvalReport, views: usize, dir: &Path) -> Result<()> {
    let curve = report.ranking_curve();
    if !curve.is_empty() {
        let mut csv = String::from("k,mean_iou\n");
        for (k, m) in curve {
            csv.push_str(&format!("{k},{m:.9}\n"));
        }
        std::fs::write(dir.join("ranking.csv"), csv)?;
    }
    if let Ok(hist) = eval::next_view_histogram(report, views) {
        std::fs::write(
            dir.join("histogram.json"),
            serde_json::to_string_pretty(&hist)? + "\n",
        )?;
    }
    Ok(())
}

/// Runs one parsed invocation; every output is read back before success.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData(_) => {
            let manifest = shapes::build_dataset(&cfg.data, &cfg.data_dir)?;
            if Manifest::load(&cfg.data_dir.join(MANIFEST_FILE))? != manifest {
                bail!("manifest read-back mismatch");
            }
            cfg.write_next_to(&cfg.data_dir)?;
            println!(
                "{} samples written to {}",
                manifest.samples.len(),
                cfg.data_dir.display()
            );
        }
        Command::Train(_) => {
            check_resolution(&cfg.train.manifest, &cfg.model)?;
            let run_dir = parent_dir(&cfg.train.checkpoint);
            cfg.write_next_to(&run_dir)?;
            let summary = train::train(&cfg.model, &cfg.train)?;
            model::load_checkpoint(&cfg.train.checkpoint, &cfg.model)?;
            let logged = train::read_log(&cfg.train.log)?;
            if logged.is_empty() {
                bail!("{}: empty training log", cfg.train.log.display());
            }
            for (epoch, mean) in &summary.epoch_losses {
                println!("epoch {epoch}\tmean loss {mean:.6}");
            }
        }
        Command::Eval(_) => {
            if cfg.eval.strategies.is_empty() {
                return Err(eval::EvalError::NoStrategies.into());
            }
            check_resolution(&cfg.train.manifest, &cfg.model)?;
            let report = eval::evaluate_files(
                &cfg.train.manifest,
                &cfg.train.checkpoint,
                &cfg.model,
                &cfg.eval,
            )?;
            eval::write_report(&report, &cfg.eval_dir)?;
            if eval::read_report(&cfg.eval_dir.join("report.json"))? != report {
                bail!("report read-back mismatch");
            }
            write_analysis(&report, cfg.model.views, &cfg.eval_dir)?;
            cfg.write_next_to(&cfg.eval_dir)?;
            print!("{}", report.to_table());
        }
        Command::Oracle(_) => {
            let records = oracle_records(&cfg)?;
            std::fs::create_dir_all(&cfg.eval_dir)?;
            let path = cfg.eval_dir.join("oracle.json");
            let text = serde_json::to_string_pretty(&records)? + "\n";
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            let back: Vec<OracleRecord> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if back != records {
                bail!("oracle read-back mismatch");
            }
            cfg.write_next_to(&cfg.eval_dir)?;
            let mean = records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64;
            println!("{} oracle selections, mean IoU {mean:.6}", records.len());
        }
        Command::Render(a) => {
            let out = cli
                .common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("render"));
            run_render(&cfg, a, &out)?;
            cfg.write_next_to(&out)?;
            println!("{} views written to {}", cfg.model.views, out.display());
        }
        Command::Report(a) => {
            let mut labelled: Vec<(String, EvalReport)> = Vec::new();
            for path in &a.reports {
                let label = path.parent().and_then(|p| p.file_name()).map_or_else(
                    || path.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                );
                labelled.push((label, eval::read_report(path)?));
            }
            let table = eval::comparison_table(&labelled)?;
            if let Some(out) = &cli.common.out {
                std::fs::create_dir_all(out)?;
                let path = out.join("comparison.txt");
                std::fs::write(&path, &table)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

/// Parses fusion names as written in configs.
pub fn parse_fusion(s: &str) -> Option<FusionMode> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
}
