//! Procedural toy object classes and on-disk datasets.
//!
//! Every class is a union of axis-aligned boxes designed in a 16-voxel frame
//! and scaled to the requested resolution. Objects keep a canonical
//! orientation (z up, chair backs towards -x, plane noses towards +x), so
//! what a viewpoint reveals depends on the class.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{self, Image};
use crate::viewsphere::ViewSphere;
use crate::voxelgrid::{self, BinaryGrid, GridError};

pub const MIN_OCCUPANCY: f64 = 0.01;
pub const MAX_OCCUPANCY: f64 = 0.6;
const MAX_RETRIES: usize = 100;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("unknown shape class '{0}'")]
    UnknownClass(String),
    #[error("could not generate a valid {class} for seed {seed} after {MAX_RETRIES} attempts")]
    Generation { class: ShapeClass, seed: u64 },
    #[error("resolution {0} too small for procedural shapes (need >= 8)")]
    Resolution(usize),
    #[error("dataset requests zero samples")]
    ZeroSamples,
    #[error("train fraction {0} outside [0, 1]")]
    BadSplit(f64),
    #[error("sample '{0}' not found in manifest")]
    UnknownSample(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Render(#[from] render::RenderError),
}

pub type Result<T> = std::result::Result<T, ShapeError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ShapeError + '_ {
    move |source| ShapeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Plane,
    Chair,
    Table,
    Tower,
    Lshape,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Plane,
        ShapeClass::Chair,
        ShapeClass::Table,
        ShapeClass::Tower,
        ShapeClass::Lshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Plane => "plane",
            ShapeClass::Chair => "chair",
            ShapeClass::Table => "table",
            ShapeClass::Tower => "tower",
            ShapeClass::Lshape => "lshape",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ShapeError::UnknownClass(s.to_string()))
    }
}

/// Half-open box in voxel coordinates of the 16-voxel design frame.
#[derive(Clone, Copy, Debug)]
struct Part {
    lo: [i32; 3],
    hi: [i32; 3],
}

fn part(x: (i32, i32), y: (i32, i32), z: (i32, i32)) -> Part {
    Part {
        lo: [x.0, y.0, z.0],
        hi: [x.1, y.1, z.1],
    }
}

/// Parts of one object in the design frame, roughly centred on (8, 8, 8).
fn design(class: ShapeClass, rng: &mut ChaCha8Rng) -> Vec<Part> {
    let mut r = |lo: i32, hi: i32| rng.gen_range(lo..=hi);
    match class {
        ShapeClass::Tower => {
            let (w, d, h) = (r(3, 5), r(3, 5), r(11, 15));
            let x0 = 8 - w / 2;
            let y0 = 8 - d / 2;
            let z0 = 8 - h / 2;
            let mut parts = vec![part((x0, x0 + w), (y0, y0 + d), (z0, z0 + h))];
            // plinth
            let grow = r(1, 2);
            parts.push(part(
                (x0 - grow, x0 + w + grow),
                (y0 - grow, y0 + d + grow),
                (z0, z0 + r(1, 2)),
            ));
            parts
        }
        ShapeClass::Lshape => {
            let (len, width, thick) = (r(9, 13), r(3, 5), r(2, 4));
            let arm = r(7, 11);
            let x0 = 8 - len / 2;
            let y0 = 8 - width / 2;
            let z0 = 8 - (thick + arm) / 2;
            let foot = part((x0, x0 + len), (y0, y0 + width), (z0, z0 + thick));
            let arm_w = r(2, 4);
            let arm_part = if r(0, 1) == 0 {
                part((x0, x0 + arm_w), (y0, y0 + width), (z0, z0 + thick + arm))
            } else {
                part(
                    (x0 + len - arm_w, x0 + len),
                    (y0, y0 + width),
                    (z0, z0 + thick + arm),
                )
            };
            vec![foot, arm_part]
        }
        ShapeClass::Table => {
            let (w, d) = (r(10, 14), r(8, 12));
            let height = r(6, 9);
            let x0 = 8 - w / 2;
            let y0 = 8 - d / 2;
            let z0 = 8 - (height + 1) / 2;
            let top = z0 + height;
            let leg = r(1, 2);
            let inset = r(0, 1);
            let mut parts = vec![part((x0, x0 + w), (y0, y0 + d), (top, top + 1))];
            for (lx, ly) in [
                (x0 + inset, y0 + inset),
                (x0 + w - inset - leg, y0 + inset),
                (x0 + inset, y0 + d - inset - leg),
                (x0 + w - inset - leg, y0 + d - inset - leg),
            ] {
                parts.push(part((lx, lx + leg), (ly, ly + leg), (z0, top)));
            }
            parts
        }
        ShapeClass::Chair => {
            let (w, d) = (r(7, 10), r(7, 10));
            let seat_h = r(5, 7);
            let back_h = r(6, 8);
            let x0 = 8 - d / 2;
            let y0 = 8 - w / 2;
            let z0 = 8 - (seat_h + 1 + back_h) / 2;
            let seat = z0 + seat_h;
            let mut parts = vec![part((x0, x0 + d), (y0, y0 + w), (seat, seat + 1))];
            for (lx, ly) in [
                (x0, y0),
                (x0 + d - 1, y0),
                (x0, y0 + w - 1),
                (x0 + d - 1, y0 + w - 1),
            ] {
                parts.push(part((lx, lx + 1), (ly, ly + 1), (z0, seat)));
            }
            // thin backrest along the -x edge
            parts.push(part(
                (x0, x0 + 1),
                (y0, y0 + w),
                (seat + 1, seat + 1 + back_h),
            ));
            parts
        }
        ShapeClass::Plane => {
            let len = r(11, 15);
            let body = r(2, 3);
            let span = r(10, 15);
            let chord = r(3, 4);
            let x0 = 8 - len / 2;
            let y0 = 8 - body / 2;
            let z0 = 8 - body / 2;
            let mut parts = vec![part((x0, x0 + len), (y0, y0 + body), (z0, z0 + body))];
            let wx = x0 + len / 2 - chord / 2 + r(0, 1);
            let wz = z0 + body / 2;
            parts.push(part(
                (wx, wx + chord),
                (8 - span / 2, 8 - span / 2 + span),
                (wz, wz + 1),
            ));
            // tail: vertical fin and horizontal stabilizer at the rear (-x)
            let fin_h = r(3, 4);
            let fin_c = r(2, 3);
            parts.push(part(
                (x0, x0 + fin_c),
                (8, 9),
                (z0 + body, z0 + body + fin_h),
            ));
            let stab = r(5, 7);
            parts.push(part(
                (x0, x0 + fin_c),
                (8 - stab / 2, 8 - stab / 2 + stab),
                (wz, wz + 1),
            ));
            parts
        }
    }
}

fn rasterize(parts: &[Part], resolution: usize, shift: [i32; 3]) -> BinaryGrid {
    let scale = resolution as f64 / 16.0;
    let mut grid = BinaryGrid::empty(resolution).expect("resolution validated");
    let map = |v: i32| ((v as f64 * scale).round() as i64).clamp(0, resolution as i64) as usize;
    for p in parts {
        let lo: [usize; 3] = std::array::from_fn(|i| map(p.lo[i] + shift[i]));
        let mut hi: [usize; 3] = std::array::from_fn(|i| map(p.hi[i] + shift[i]));
        for i in 0..3 {
            // keep one-voxel panels at least one voxel thick after scaling
            if hi[i] <= lo[i] && p.hi[i] > p.lo[i] {
                hi[i] = (lo[i] + 1).min(resolution);
            }
        }
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    grid.set(x, y, z, true);
                }
            }
        }
    }
    grid
}

/// Whether the occupied voxels form one 6-connected component.
pub fn is_connected(grid: &BinaryGrid) -> bool {
    let d = grid.resolution();
    let bits = grid.bits();
    let Some(start) = bits.iter().position(|&b| b) else {
        return false;
    };
    let mut seen = vec![false; bits.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut reached = 1;
    while let Some(i) = queue.pop_front() {
        let (x, y, z) = voxelgrid::coords(d, i);
        let mut visit = |nx: usize, ny: usize, nz: usize| {
            let j = voxelgrid::flat_index(d, nx, ny, nz);
            if bits[j] && !seen[j] {
                seen[j] = true;
                reached += 1;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(x - 1, y, z);
        }
        if x + 1 < d {
            visit(x + 1, y, z);
        }
        if y > 0 {
            visit(x, y - 1, z);
        }
        if y + 1 < d {
            visit(x, y + 1, z);
        }
        if z > 0 {
            visit(x, y, z - 1);
        }
        if z + 1 < d {
            visit(x, y, z + 1);
        }
    }
    reached == grid.count()
}

fn valid_shape(grid: &BinaryGrid) -> bool {
    let f = grid.occupancy_fraction();
    (MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&f) && is_connected(grid)
}

/// Deterministic shape for `(class, seed, resolution)`.
pub fn generate_shape(class: ShapeClass, seed: u64, resolution: usize) -> Result<BinaryGrid> {
    if resolution < 8 {
        return Err(ShapeError::Resolution(resolution));
    }
    voxelgrid::BinaryGrid::empty(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.stream());
    for _ in 0..MAX_RETRIES {
        let parts = design(class, &mut rng);
        let shift = [
            rng.gen_range(-1..=1),
            rng.gen_range(-1..=1),
            rng.gen_range(-1..=1),
        ];
        let grid = rasterize(&parts, resolution, shift);
        if valid_shape(&grid) {
            return Ok(grid);
        }
    }
    Err(ShapeError::Generation { class, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: Vec<ShapeClass>,
    pub samples_per_class: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: ShapeClass::ALL.to_vec(),
            samples_per_class: 40,
            train_fraction: 0.8,
            seed: 0,
            resolution: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub class: ShapeClass,
    pub seed: u64,
    pub split: Split,
    pub grid_path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_seed: u64,
    pub resolution: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn entry(&self, sample_id: &str) -> Result<&ManifestEntry> {
        self.samples
            .iter()
            .find(|s| s.sample_id == sample_id)
            .ok_or_else(|| ShapeError::UnknownSample(sample_id.to_string()))
    }
}

/// Assigns seeds and splits without touching the filesystem.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Manifest> {
    if cfg.samples_per_class == 0 || cfg.classes.is_empty() {
        return Err(ShapeError::ZeroSamples);
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(ShapeError::BadSplit(cfg.train_fraction));
    }
    if cfg.resolution < 8 || cfg.resolution > voxelgrid::MAX_RESOLUTION {
        return Err(ShapeError::Resolution(cfg.resolution));
    }
    let n = cfg.samples_per_class;
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let mut samples = Vec::with_capacity(n * cfg.classes.len());
    for &class in &cfg.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(class.stream());
        let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Test; n];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }
        for (i, &seed) in seeds.iter().enumerate() {
            let sample_id = format!("{class}_{i:04}");
            samples.push(ManifestEntry {
                grid_path: format!("grids/{sample_id}.vxg"),
                sample_id,
                class,
                seed,
                split: split[i],
            });
        }
    }
    Ok(Manifest {
        dataset_seed: cfg.seed,
        resolution: cfg.resolution,
        samples,
    })
}

/// Generates every grid into `out_dir/grids/` and writes
/// `out_dir/manifest.json` once all grids are on disk.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let manifest = plan_dataset(cfg)?;
    let grid_dir = out_dir.join("grids");
    std::fs::create_dir_all(&grid_dir).map_err(io_err(&grid_dir))?;
    manifest
        .samples
        .par_iter()
        .try_for_each(|entry| -> Result<()> {
            let grid = generate_shape(entry.class, entry.seed, manifest.resolution)?;
            let path = out_dir.join(&entry.grid_path);
            std::fs::write(&path, voxelgrid::binary_to_bytes(&grid)).map_err(io_err(&path))
        })?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// One dataset row with its rendered views.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub class: ShapeClass,
    pub truth: BinaryGrid,
    /// One image per viewpoint, ordered by view id.
    pub views: Vec<Image>,
    pub split: Split,
}

impl Sample {
    pub fn from_grid(
        entry: &ManifestEntry,
        truth: BinaryGrid,
        sphere: &ViewSphere,
        image_size: usize,
    ) -> Result<Self> {
        let views = render::render_all(&truth, sphere, image_size)?;
        Ok(Self {
            sample_id: entry.sample_id.clone(),
            class: entry.class,
            truth,
            views,
            split: entry.split,
        })
    }
}

/// Loads one grid referenced by a manifest living in `root`.
pub fn load_grid(root: &Path, entry: &ManifestEntry) -> Result<BinaryGrid> {
    let path = root.join(&entry.grid_path);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    Ok(voxelgrid::grid_from_bytes(&bytes)?.into_binary(voxelgrid::DEFAULT_THRESHOLD)?)
}

/// Loads and renders every sample of one split, in manifest order.
pub fn load_samples(
    manifest: &Manifest,
    root: &Path,
    split: Split,
    sphere: &ViewSphere,
    image_size: usize,
) -> Result<Vec<Sample>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| Sample::from_grid(e, load_grid(root, e)?, sphere, image_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent flood fill over explicit coordinates.
    fn components(grid: &BinaryGrid) -> usize {
        let d = grid.resolution() as i32;
        let mut label = vec![0usize; grid.bits().len()];
        let mut count = 0;
        for start in 0..grid.bits().len() {
            if !grid.bits()[start] || label[start] != 0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            label[start] = count;
            while let Some(i) = stack.pop() {
                let (x, y, z) = voxelgrid::coords(d as usize, i);
                let (x, y, z) = (x as i32, y as i32, z as i32);
                for (dx, dy, dz) in [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ] {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= d || ny >= d || nz >= d {
                        continue;
                    }
                    let j = ((nz * d + ny) * d + nx) as usize;
                    if grid.bits()[j] && label[j] == 0 {
                        label[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn deterministic() {
        let a = generate_shape(ShapeClass::Tower, 1, 16).unwrap();
        let b = generate_shape(ShapeClass::Tower, 1, 16).unwrap();
        assert_eq!(a, b);
        let c = generate_shape(ShapeClass::Chair, 1, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_class_is_connected_and_sized() {
        for class in ShapeClass::ALL {
            for seed in 0..30 {
                for res in [16, 32] {
                    let g = generate_shape(class, seed, res).unwrap();
                    assert_eq!(components(&g), 1, "{class} seed {seed} res {res}");
                    assert!(is_connected(&g));
                    let f = g.occupancy_fraction();
                    assert!((0.01..=0.6).contains(&f), "{class} {seed} {f}");
                }
            }
        }
    }

    #[test]
    fn connectivity_detects_split_sets() {
        let mut g = BinaryGrid::empty(8).unwrap();
        g.set(0, 0, 0, true);
        g.set(1, 1, 0, true);
        assert!(!is_connected(&g));
        g.set(1, 0, 0, true);
        assert!(is_connected(&g));
        assert!(!is_connected(&BinaryGrid::empty(8).unwrap()));
    }

    #[test]
    fn class_names_round_trip() {
        for c in ShapeClass::ALL {
            assert_eq!(c.name().parse::<ShapeClass>().unwrap(), c);
        }
        assert!("sofa".parse::<ShapeClass>().is_err());
    }

    #[test]
    fn plan_counts_and_split() {
        let cfg = DatasetConfig {
            samples_per_class: 10,
            ..Default::default()
        };
        let m = plan_dataset(&cfg).unwrap();
        assert_eq!(m.split(Split::Train).count(), 40);
        assert_eq!(m.split(Split::Test).count(), 10);
        for class in ShapeClass::ALL {
            assert_eq!(m.samples.iter().filter(|s| s.class == class).count(), 10);
        }
        let other = plan_dataset(&DatasetConfig {
            seed: 5,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(other, m);
        assert_eq!(other.split(Split::Train).count(), 40);
        assert!(plan_dataset(&DatasetConfig {
            samples_per_class: 0,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn build_writes_reproducible_files() {
        let cfg = DatasetConfig {
            samples_per_class: 3,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg, a.path()).unwrap();
        build_dataset(&cfg, b.path()).unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap(), m);
        for e in &m.samples {
            let g = load_grid(a.path(), e).unwrap();
            assert_eq!(g, generate_shape(e.class, e.seed, m.resolution).unwrap());
        }
    }

    #[test]
    fn build_rejects_unwritable_dir() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        let cfg = DatasetConfig {
            samples_per_class: 1,
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&cfg, &file),
            Err(ShapeError::Io { .. })
        ));
    }
}
