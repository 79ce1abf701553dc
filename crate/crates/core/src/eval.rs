//! View-selection strategies, IoU evaluation and report artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{self, Model, ModelConfig, ModelError, SelectionDistribution};
use crate::shapes::{self, Manifest, Sample, ShapeError, Split};
use crate::viewsphere::{self, ViewError, ViewSphere};
use crate::voxelgrid::{self, GridError};

/// Fixed evaluation base view: elevation 0, azimuth 0.
pub const DEFAULT_BASE_VIEW: usize = 7;
/// Probability that a non-base view stays available under a random mask.
pub const MASK_KEEP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("oracle selection needs per-candidate IoUs")]
    OracleWithoutTruth,
    #[error("learned_kth({k}) needs 1 <= k <= {views}")]
    BadRank { k: usize, views: usize },
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("no strategies requested")]
    NoStrategies,
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("report lacks strategy {0}")]
    MissingStrategy(String),
    #[error("base view {0} out of range")]
    BadBase(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Data(#[from] ShapeError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    LearnedBest,
    LearnedKth(usize),
    Random(u64),
    Farthest,
    Oracle,
    /// Learned choice restricted to a seeded random availability mask.
    Masked(u64),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::LearnedBest => f.write_str("learned_best"),
            Strategy::LearnedKth(k) => write!(f, "learned_kth:{k}"),
            Strategy::Random(s) => write!(f, "random:{s}"),
            Strategy::Farthest => f.write_str("farthest"),
            Strategy::Oracle => f.write_str("oracle"),
            Strategy::Masked(s) => write!(f, "masked:{s}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || EvalError::UnknownStrategy(s.to_string());
        let arg = |prefix: &str| {
            s.strip_prefix(prefix)
                .map(|a| a.parse::<u64>().map_err(|_| unknown()))
        };
        Ok(match s {
            "learned_best" => Strategy::LearnedBest,
            "farthest" => Strategy::Farthest,
            "oracle" => Strategy::Oracle,
            "random" => Strategy::Random(0),
            "masked" => Strategy::Masked(0),
            _ => {
                if let Some(k) = arg("learned_kth:") {
                    Strategy::LearnedKth(k? as usize)
                } else if let Some(seed) = arg("random:") {
                    Strategy::Random(seed?)
                } else if let Some(seed) = arg("masked:") {
                    Strategy::Masked(seed?)
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = EvalError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl Strategy {
    /// Every strategy of a full comparison: learned ranks 1..=views, five
    /// random seeds, farthest, oracle and one masked run.
    pub fn standard_set(views: usize) -> Vec<Strategy> {
        let mut out = vec![Strategy::LearnedBest];
        out.extend((2..=views).map(Strategy::LearnedKth));
        out.extend((0..5).map(Strategy::Random));
        out.extend([Strategy::Farthest, Strategy::Oracle, Strategy::Masked(0)]);
        out
    }
}

/// Per-call context for [`select_view`].
#[derive(Clone, Copy, Debug)]
pub struct SelectContext<'a> {
    /// IoU of every candidate reconstruction; required by the oracle.
    pub ious: Option<&'a [f64]>,
    /// Stable ordinal of the sample, mixed into per-sample seeds.
    pub sample_index: u64,
    /// Whether the base view itself may be chosen.
    pub include_base: bool,
}

fn rng_for(seed: u64, sample_index: u64, base: usize, views: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index * views as u64 + base as u64 + 1);
    rng
}

/// Seeded availability of each view for one `(sample, base)` pair. At least
/// one candidate is always available.
pub fn availability_mask(
    seed: u64,
    sample_index: u64,
    base: usize,
    views: usize,
    include_base: bool,
) -> Vec<bool> {
    let mut rng = rng_for(seed ^ 0x6d61_736b, sample_index, base, views);
    let mut avail: Vec<bool> = (0..views).map(|_| rng.gen_bool(MASK_KEEP)).collect();
    if !include_base {
        avail[base] = false;
    }
    if !avail.iter().any(|&a| a) {
        let candidates: Vec<usize> = (0..views).filter(|&v| include_base || v != base).collect();
        avail[candidates[rng.gen_range(0..candidates.len())]] = true;
    }
    avail
}

pub fn select_view(
    strategy: Strategy,
    p: &SelectionDistribution,
    base: usize,
    sphere: &ViewSphere,
    ctx: &SelectContext<'_>,
) -> Result<usize> {
    let views = p.len();
    if base >= views {
        return Err(EvalError::BadBase(base));
    }
    Ok(match strategy {
        Strategy::LearnedBest => p.argmax(),
        Strategy::LearnedKth(k) => {
            if k == 0 || k > views {
                return Err(EvalError::BadRank { k, views });
            }
            p.ranking()[k - 1]
        }
        Strategy::Random(seed) => {
            let candidates: Vec<usize> = (0..views)
                .filter(|&v| ctx.include_base || v != base)
                .collect();
            let mut rng = rng_for(seed, ctx.sample_index, base, views);
            candidates[rng.gen_range(0..candidates.len())]
        }
        Strategy::Farthest => viewsphere::farthest_view(sphere.get(base)?, sphere)?.id,
        Strategy::Oracle => {
            let ious = ctx.ious.ok_or(EvalError::OracleWithoutTruth)?;
            let avail: Vec<bool> = (0..views).map(|v| ctx.include_base || v != base).collect();
            viewsphere::masked_argmax(ious, &avail)?
        }
        Strategy::Masked(seed) => {
            let avail = availability_mask(seed, ctx.sample_index, base, views, ctx.include_base);
            viewsphere::masked_argmax(p.probs(), &avail)?
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaseMode {
    Fixed(usize),
    /// Every view serves as base once.
    Sweep,
}

impl fmt::Display for BaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseMode::Fixed(id) => write!(f, "fixed:{id}"),
            BaseMode::Sweep => f.write_str("sweep"),
        }
    }
}

impl FromStr for BaseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "sweep" {
            return Ok(BaseMode::Sweep);
        }
        s.strip_prefix("fixed:")
            .and_then(|v| v.parse().ok())
            .map(BaseMode::Fixed)
            .ok_or_else(|| format!("base mode '{s}' is not sweep or fixed:<id>"))
    }
}

impl TryFrom<String> for BaseMode {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<BaseMode> for String {
    fn from(b: BaseMode) -> String {
        b.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strategies: Vec<Strategy>,
    pub base: BaseMode,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::standard_set(11),
            base: BaseMode::Fixed(DEFAULT_BASE_VIEW),
            threshold: voxelgrid::DEFAULT_THRESHOLD as f64,
        }
    }
}

/// Outcome of one strategy on one `(sample, base)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub class: String,
    pub base: usize,
    pub strategy: Strategy,
    pub choice: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub strategy: Strategy,
    pub mean_iou: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub strategy: Strategy,
    pub mean_iou: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub base: BaseMode,
    pub threshold: f64,
    pub strategies: Vec<Strategy>,
    pub rows: Vec<ReportRow>,
    pub overall: Vec<OverallRow>,
    /// learned_best selections per class, one bin per view id.
    pub histograms: BTreeMap<String, Vec<usize>>,
    pub samples: Vec<SampleResult>,
}

/// SHA-256 (hex) of the model and evaluation configs.
pub fn config_digest(model_cfg: &ModelConfig, cfg: &EvalConfig) -> String {
    let text = serde_json::to_string(&(model_cfg, cfg)).expect("configs serialize");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Every strategy on every `(sample, base)` pair; per-candidate IoUs are
/// computed once per pair and shared by all strategies.
pub fn evaluate_samples(
    model: &Model<f32>,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<Vec<SampleResult>> {
    if cfg.strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let views = model.config().views;
    let bases: Vec<usize> = match cfg.base {
        BaseMode::Fixed(id) if id < views => vec![id],
        BaseMode::Fixed(id) => return Err(EvalError::BadBase(id)),
        BaseMode::Sweep => (0..views).collect(),
    };
    for s in &cfg.strategies {
        if let Strategy::LearnedKth(k) = *s {
            if k == 0 || k > views {
                return Err(EvalError::BadRank { k, views });
            }
        }
    }
    let sphere = ViewSphere::canonical();
    let include_base = model.config().include_base_in_candidates;
    let threshold = cfg.threshold as f32;
    let per_sample: Vec<Result<Vec<SampleResult>>> = samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let mut out = Vec::new();
            for &base in &bases {
                let (p, vols) = model.candidate_volumes(&sample.views, base)?;
                let ious = vols
                    .iter()
                    .map(|v| voxelgrid::iou(v, &sample.truth, threshold))
                    .collect::<std::result::Result<Vec<f64>, _>>()?;
                let ctx = SelectContext {
                    ious: Some(&ious),
                    sample_index: index as u64,
                    include_base,
                };
                for &strategy in &cfg.strategies {
                    let choice = select_view(strategy, &p, base, &sphere, &ctx)?;
                    out.push(SampleResult {
                        sample_id: sample.sample_id.clone(),
                        class: sample.class.to_string(),
                        base,
                        strategy,
                        choice,
                        iou: ious[choice],
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut results = Vec::new();
    for r in per_sample {
        results.extend(r?);
    }
    Ok(results)
}

/// Aggregates sample results into class rows, overall rows and histograms.
pub fn build_report(
    results: Vec<SampleResult>,
    strategies: &[Strategy],
    base: BaseMode,
    threshold: f64,
    digest: String,
    views: usize,
) -> Result<EvalReport> {
    if strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let mut sums: BTreeMap<(String, Strategy), (f64, usize)> = BTreeMap::new();
    let mut overall: BTreeMap<Strategy, (f64, usize)> = BTreeMap::new();
    let mut histograms: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in &results {
        let e = sums.entry((r.class.clone(), r.strategy)).or_default();
        e.0 += r.iou;
        e.1 += 1;
        let o = overall.entry(r.strategy).or_default();
        o.0 += r.iou;
        o.1 += 1;
        if r.strategy == Strategy::LearnedBest {
            histograms
                .entry(r.class.clone())
                .or_insert_with(|| vec![0; views])[r.choice] += 1;
        }
    }
    let classes: Vec<String> = {
        let mut c: Vec<String> = sums.keys().map(|(c, _)| c.clone()).collect();
        c.dedup();
        c
    };
    let mut rows = Vec::new();
    for class in &classes {
        for s in strategies {
            if let Some(&(total, n)) = sums.get(&(class.clone(), *s)) {
                rows.push(ReportRow {
                    class: class.clone(),
                    strategy: *s,
                    mean_iou: total / n as f64,
                    n,
                });
            }
        }
    }
    let overall = strategies
        .iter()
        .filter_map(|s| {
            overall.get(s).map(|&(total, n)| OverallRow {
                strategy: *s,
                mean_iou: total / n as f64,
                n,
            })
        })
        .collect();
    Ok(EvalReport {
        config_digest: digest,
        base,
        threshold,
        strategies: strategies.to_vec(),
        rows,
        overall,
        histograms,
        samples: results,
    })
}

/// Evaluates `model` on `samples` and builds the report.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    let results = evaluate_samples(model, samples, cfg)?;
    build_report(
        results,
        &cfg.strategies,
        cfg.base,
        cfg.threshold,
        config_digest(model.config(), cfg),
        model.config().views,
    )
}

/// Loads the test split and the checkpoint, then evaluates.
pub fn evaluate_files(
    manifest_path: &Path,
    checkpoint: &Path,
    model_cfg: &ModelConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let (mut model, _) = model::load_checkpoint(checkpoint, model_cfg)?;
    model.set_behaviour(model_cfg.fusion, model_cfg.include_base_in_candidates);
    let samples = load_test_samples(manifest_path, model_cfg)?;
    evaluate(&model, &samples, cfg)
}

pub fn load_test_samples(manifest_path: &Path, model_cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = shapes::load_samples(
        &manifest,
        root,
        Split::Test,
        &ViewSphere::canonical(),
        model_cfg.image_size,
    )?;
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    Ok(samples)
}

impl EvalReport {
    pub fn overall_mean(&self, strategy: Strategy) -> Option<f64> {
        self.overall
            .iter()
            .find(|r| r.strategy == strategy)
            .map(|r| r.mean_iou)
    }

    /// Sample-count-weighted mean of the class rows of one strategy.
    pub fn weighted_class_mean(&self, strategy: Strategy) -> Option<f64> {
        let (total, n) = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .fold((0.0, 0), |(t, n), r| (t + r.mean_iou * r.n as f64, n + r.n));
        (n > 0).then(|| total / n as f64)
    }

    /// Mean IoU of `learned_kth(k)` for every `k` present (rank 1 is
    /// `learned_best`), in rank order.
    pub fn ranking_curve(&self) -> Vec<(usize, f64)> {
        let mut curve: Vec<(usize, f64)> = self
            .overall
            .iter()
            .filter_map(|r| match r.strategy {
                Strategy::LearnedBest => Some((1, r.mean_iou)),
                Strategy::LearnedKth(k) => Some((k, r.mean_iou)),
                _ => None,
            })
            .collect();
        curve.sort_by_key(|&(k, _)| k);
        curve.dedup_by_key(|&mut (k, _)| k);
        curve
    }

    /// Aligned table: one row per class plus an overall row, one column per
    /// strategy, six decimals.
    pub fn to_table(&self) -> String {
        let mut header = vec!["class".to_string()];
        header.extend(self.strategies.iter().map(Strategy::to_string));
        let mut lines = vec![header];
        let mut classes: Vec<&str> = self.rows.iter().map(|r| r.class.as_str()).collect();
        classes.dedup();
        for class in classes {
            let mut line = vec![class.to_string()];
            for s in &self.strategies {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.class == class && r.strategy == *s)
                    .map_or("-".to_string(), |r| format!("{:.6}", r.mean_iou));
                line.push(cell);
            }
            lines.push(line);
        }
        let mut line = vec!["overall".to_string()];
        for s in &self.strategies {
            line.push(
                self.overall_mean(*s)
                    .map_or("-".to_string(), |m| format!("{m:.6}")),
            );
        }
        lines.push(line);
        align(&lines)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn align(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            lines
                .iter()
                .filter_map(|l| l.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for l in lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if i == 0 {
                    format!("{cell:<w$}", w = widths[i])
                } else {
                    format!("{cell:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    if report.strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()).map_err(io_err(&json))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, report.to_table()).map_err(io_err(&txt))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    EvalReport::from_json(&text)
}

/// Best and second-best learned selections per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextViewHistogram {
    pub best: BTreeMap<String, Vec<usize>>,
    pub second: BTreeMap<String, Vec<usize>>,
}

pub fn next_view_histogram(report: &EvalReport, views: usize) -> Result<NextViewHistogram> {
    let mut out = NextViewHistogram {
        best: BTreeMap::new(),
        second: BTreeMap::new(),
    };
    for (strategy, map) in [
        (Strategy::LearnedBest, &mut out.best),
        (Strategy::LearnedKth(2), &mut out.second),
    ] {
        if !report.strategies.contains(&strategy) {
            return Err(EvalError::MissingStrategy(strategy.to_string()));
        }
        for r in report.samples.iter().filter(|r| r.strategy == strategy) {
            map.entry(r.class.clone()).or_insert_with(|| vec![0; views])[r.choice] += 1;
        }
    }
    Ok(out)
}

/// Comparison of several reports: one column per `label:strategy`.
pub fn comparison_table(reports: &[(String, EvalReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let mut header = vec!["class".to_string()];
    let mut columns = Vec::new();
    for (label, rep) in reports {
        for s in &rep.strategies {
            header.push(format!("{label}:{s}"));
            columns.push((rep, *s));
        }
    }
    let mut classes: Vec<String> = reports
        .iter()
        .flat_map(|(_, r)| r.rows.iter().map(|row| row.class.clone()))
        .collect();
    classes.sort();
    classes.dedup();
    let mut lines = vec![header];
    for class in &classes {
        let mut line = vec![class.clone()];
        for (rep, s) in &columns {
            line.push(
                rep.rows
                    .iter()
                    .find(|r| &r.class == class && r.strategy == *s)
                    .map_or("-".to_string(), |r| format!("{:.6}", r.mean_iou)),
            );
        }
        lines.push(line);
    }
    let mut line = vec!["overall".to_string()];
    for (rep, s) in &columns {
        line.push(
            rep.overall_mean(*s)
                .map_or("-".to_string(), |m| format!("{m:.6}")),
        );
    }
    lines.push(line);
    Ok(align(&lines))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
