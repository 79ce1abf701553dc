//! Orthographic depth rendering of voxel grids and training-time augmentation.
//!
//! The grid occupies the cube `[-0.5, 0.5]^3` centred at the origin. A view
//! looks along `-position` with world +z projected into the image as "up".
//! The image plane spans `[-1, 1]^2`, which contains the projection of the
//! cube from any direction. Each pixel casts one ray through its centre and
//! stores the normalized depth of the first occupied voxel (1 nearest, 0.2
//! farthest, 0 background) in all three channels.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::viewsphere::{ViewSphere, Viewpoint};
use crate::voxelgrid::BinaryGrid;

pub const CHANNELS: usize = 3;
pub const MIN_IMAGE_SIZE: usize = 8;
pub const NEAR_INTENSITY: f32 = 1.0;
pub const FAR_INTENSITY: f32 = 0.2;

/// Distance from the image plane to the origin along the view direction.
const CAMERA_DISTANCE: f64 = 2.0;
/// Half extent of the image plane.
const HALF_EXTENT: f64 = 1.0;
/// Crossing times closer than this (grid units) count as simultaneous.
const TIE_EPS: f64 = 1e-9;
/// Bounding-sphere radius of the unit cube.
const CUBE_RADIUS: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image size {0} below minimum {MIN_IMAGE_SIZE}")]
    SizeTooSmall(usize),
    #[error("pixel buffer has {got} values, expected {expected}")]
    BadPixelCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RenderError>;

/// Square three-channel image stored channel-major (`[c][y][x]`), values in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        let expected = CHANNELS * size * size;
        if pixels.len() != expected {
            return Err(RenderError::BadPixelCount {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self { size, pixels })
    }

    pub fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; CHANNELS * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels[(channel * self.size + y) * self.size + x]
    }

    fn plane(&self) -> usize {
        self.size * self.size
    }

    /// Whether pixel `(y, x)` is exactly zero in every channel.
    pub fn is_background(&self, y: usize, x: usize) -> bool {
        let p = y * self.size + x;
        (0..CHANNELS).all(|c| self.pixels[c * self.plane() + p] == 0.0)
    }

    /// Foreground mask, row-major.
    pub fn silhouette(&self) -> Vec<bool> {
        let n = self.plane();
        (0..n)
            .map(|p| !self.is_background(p / self.size, p % self.size))
            .collect()
    }

    /// Binary PPM (P6, 8-bit).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        let n = self.plane();
        for p in 0..n {
            for c in 0..CHANNELS {
                let v = self.pixels[c * n + p].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Orthographic camera for one viewpoint.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub direction: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
}

impl Camera {
    pub fn new(view: &Viewpoint) -> Self {
        let d = view.position();
        let reference = if view.elevation_deg.abs() >= 90.0 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let dot = reference[0] * d[0] + reference[1] * d[1] + reference[2] * d[2];
        let up = normalize([
            reference[0] - dot * d[0],
            reference[1] - dot * d[1],
            reference[2] - dot * d[2],
        ]);
        let forward = [-d[0], -d[1], -d[2]];
        Self {
            direction: d,
            right: cross(forward, up),
            up,
        }
    }

    /// Image-plane coordinates of the centre of pixel `(py, px)`.
    pub fn pixel_center(size: usize, py: usize, px: usize) -> (f64, f64) {
        let step = 2.0 * HALF_EXTENT / size as f64;
        let a = -HALF_EXTENT + (px as f64 + 0.5) * step;
        let b = HALF_EXTENT - (py as f64 + 0.5) * step;
        (a, b)
    }

    /// World-space ray origin for image-plane coordinates `(a, b)`; rays
    /// travel along `-direction`.
    pub fn ray_origin(&self, a: f64, b: f64) -> [f64; 3] {
        let mut o = [0.0; 3];
        for (i, v) in o.iter_mut().enumerate() {
            *v = a * self.right[i] + b * self.up[i] + CAMERA_DISTANCE * self.direction[i];
        }
        o
    }
}

/// Pixel intensity for a first hit at ray parameter `t` (world units).
pub fn depth_intensity(t: f64) -> f32 {
    let near = CAMERA_DISTANCE - CUBE_RADIUS;
    let frac = ((t - near) / (2.0 * CUBE_RADIUS)).clamp(0.0, 1.0);
    (NEAR_INTENSITY as f64 - (NEAR_INTENSITY - FAR_INTENSITY) as f64 * frac) as f32
}

/// First occupied voxel along a ray, via a 3D DDA walk. Returns the world
/// ray parameter at which the ray enters that voxel.
fn first_hit(grid: &BinaryGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let d = grid.resolution();
    let df = d as f64;
    // grid coordinates: voxel (x, y, z) spans [x, x+1) etc.
    let o: [f64; 3] = std::array::from_fn(|i| (origin[i] + 0.5) * df);
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if o[i] < 0.0 || o[i] >= df {
                return None;
            }
        } else {
            let t0 = (0.0 - o[i]) / dir[i];
            let t1 = (df - o[i]) / dir[i];
            t_enter = t_enter.max(t0.min(t1));
            t_exit = t_exit.min(t0.max(t1));
        }
    }
    if t_enter >= t_exit || t_exit <= 0.0 {
        return None;
    }
    let t_start = t_enter.max(0.0);
    let mut cell = [0usize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        let p = o[i] + dir[i] * t_start;
        let c = (p.floor().max(0.0) as usize).min(d - 1);
        cell[i] = c;
        if dir[i] > 0.0 {
            step[i] = 1;
            t_max[i] = ((c + 1) as f64 - o[i]) / dir[i];
            t_delta[i] = 1.0 / dir[i];
        } else if dir[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (c as f64 - o[i]) / dir[i];
            t_delta[i] = -1.0 / dir[i];
        }
    }
    let mut t = t_start;
    loop {
        if grid.get(cell[0], cell[1], cell[2]) {
            return Some(t / df);
        }
        // a ray crossing an edge or corner exactly steps diagonally, so cells
        // touched at a single point are never visited
        t = t_max[0].min(t_max[1]).min(t_max[2]);
        if t >= t_exit {
            return None;
        }
        for axis in 0..3 {
            if t_max[axis] <= t + TIE_EPS {
                let next = cell[axis] as isize + step[axis];
                if next < 0 || next >= d as isize {
                    return None;
                }
                cell[axis] = next as usize;
                t_max[axis] += t_delta[axis];
            }
        }
    }
}

/// Renders the depth image of `grid` seen from `view`.
pub fn render_view(grid: &BinaryGrid, view: &Viewpoint, size: usize) -> Result<Image> {
    if size < MIN_IMAGE_SIZE {
        return Err(RenderError::SizeTooSmall(size));
    }
    let cam = Camera::new(view);
    let dir = [-cam.direction[0], -cam.direction[1], -cam.direction[2]];
    let plane = size * size;
    let mut pixels = vec![0.0f32; CHANNELS * plane];
    for py in 0..size {
        for px in 0..size {
            let (a, b) = Camera::pixel_center(size, py, px);
            if let Some(t) = first_hit(grid, cam.ray_origin(a, b), dir) {
                let v = depth_intensity(t);
                for c in 0..CHANNELS {
                    pixels[c * plane + py * size + px] = v;
                }
            }
        }
    }
    Ok(Image { size, pixels })
}

/// One image per view, ordered by view id.
pub fn render_all(grid: &BinaryGrid, sphere: &ViewSphere, size: usize) -> Result<Vec<Image>> {
    sphere
        .views()
        .par_iter()
        .map(|v| render_view(grid, v, size))
        .collect()
}

pub fn render_all_serial(
    grid: &BinaryGrid,
    sphere: &ViewSphere,
    size: usize,
) -> Result<Vec<Image>> {
    sphere
        .views()
        .iter()
        .map(|v| render_view(grid, v, size))
        .collect()
}

/// Augmentation bounds.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Per-value jitter is uniform in `[-jitter, jitter]`.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { jitter: 0.02 }
    }
}

/// Replaces background pixels by one random colour, then adds independent
/// uniform jitter to every value and clamps to `[0, 1]`.
pub fn augment(img: &Image, seed: u64) -> Image {
    augment_with(img, seed, &AugmentConfig::default())
}

pub fn augment_with(img: &Image, seed: u64, cfg: &AugmentConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color: [f32; CHANNELS] = std::array::from_fn(|_| rng.gen::<f32>());
    let plane = img.plane();
    let mut pixels = img.pixels.clone();
    for p in 0..plane {
        if (0..CHANNELS).all(|c| img.pixels[c * plane + p] == 0.0) {
            for (c, &col) in color.iter().enumerate() {
                pixels[c * plane + p] = col;
            }
        }
    }
    if cfg.jitter > 0.0 {
        for v in pixels.iter_mut() {
            *v = (*v + rng.gen_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0);
        }
    }
    Image {
        size: img.size,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viewsphere::ViewSphere;
    use crate::voxelgrid::flat_index;
    use rand::Rng;

    fn random_grid(d: usize, p: f64, seed: u64) -> BinaryGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryGrid::new(d, (0..d * d * d).map(|_| rng.gen_bool(p)).collect()).unwrap()
    }

    /// Brute force: intersect the pixel ray with every occupied voxel box.
    fn oracle(grid: &BinaryGrid, view: &Viewpoint, size: usize) -> Vec<Option<f64>> {
        let cam = Camera::new(view);
        let dir = [-cam.direction[0], -cam.direction[1], -cam.direction[2]];
        let d = grid.resolution();
        let h = 1.0 / d as f64;
        let mut out = Vec::new();
        for py in 0..size {
            for px in 0..size {
                let (a, b) = Camera::pixel_center(size, py, px);
                let o = cam.ray_origin(a, b);
                let mut best: Option<f64> = None;
                for z in 0..d {
                    for y in 0..d {
                        for x in 0..d {
                            if !grid.bits()[flat_index(d, x, y, z)] {
                                continue;
                            }
                            let lo = [x as f64 * h - 0.5, y as f64 * h - 0.5, z as f64 * h - 0.5];
                            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                            let mut miss = false;
                            for i in 0..3 {
                                if dir[i].abs() < 1e-15 {
                                    if o[i] < lo[i] || o[i] >= lo[i] + h {
                                        miss = true;
                                    }
                                } else {
                                    let ta = (lo[i] - o[i]) / dir[i];
                                    let tb = (lo[i] + h - o[i]) / dir[i];
                                    t0 = t0.max(ta.min(tb));
                                    t1 = t1.min(ta.max(tb));
                                }
                            }
                            if !miss && t1 - t0 > 1e-9 / d as f64 {
                                best = Some(best.map_or(t0, |b: f64| b.min(t0)));
                            }
                        }
                    }
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn empty_grid_renders_black() {
        let g = BinaryGrid::empty(8).unwrap();
        for v in ViewSphere::canonical().views() {
            let img = render_view(&g, v, 16).unwrap();
            assert!(img.pixels().iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let g = BinaryGrid::empty(4).unwrap();
        let v = Viewpoint::new(0, 0.0, 0.0);
        assert!(matches!(
            render_view(&g, &v, 4),
            Err(RenderError::SizeTooSmall(4))
        ));
    }

    #[test]
    fn full_grid_axis_aligned_is_a_centered_square() {
        let g = BinaryGrid::full(8).unwrap();
        for az in [0.0, 90.0, 180.0, 270.0] {
            let img = render_view(&g, &Viewpoint::new(0, 0.0, az), 16).unwrap();
            // projected cube spans [-0.5, 0.5] -> pixels 4..12 of 16
            let near = depth_intensity(CAMERA_DISTANCE - 0.5);
            for y in 0..16 {
                for x in 0..16 {
                    let inside = (4..12).contains(&y) && (4..12).contains(&x);
                    let v = img.get(0, y, x);
                    if inside {
                        assert!((v - near).abs() < 1e-6, "{az} ({y},{x}) {v}");
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_projection() {
        let sphere = ViewSphere::canonical();
        for seed in 0..3 {
            let g = random_grid(8, 0.08, seed);
            for v in sphere.views() {
                let img = render_view(&g, v, 16).unwrap();
                let expect = oracle(&g, v, 16);
                for (p, e) in expect.iter().enumerate() {
                    let got = img.get(0, p / 16, p % 16);
                    match e {
                        None => assert_eq!(got, 0.0, "view {} pixel {p} seed {seed}", v.id),
                        Some(t) => assert!(
                            (got - depth_intensity(*t)).abs() < 1e-5,
                            "view {} pixel {p} got {got} want {}",
                            v.id,
                            depth_intensity(*t)
                        ),
                    }
                    assert_eq!(img.get(1, p / 16, p % 16), got);
                    assert_eq!(img.get(2, p / 16, p % 16), got);
                }
            }
        }
    }

    #[test]
    fn rotation_about_z_matches_azimuth_shift() {
        let d = 8;
        let g = random_grid(d, 0.1, 11);
        // rotate +90 degrees about z: (x, y) -> (d-1-y, x)
        let mut rot = BinaryGrid::empty(d).unwrap();
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    if g.get(x, y, z) {
                        rot.set(d - 1 - y, x, z, true);
                    }
                }
            }
        }
        for az in [0.0, 90.0, 180.0, 270.0] {
            let a = render_view(&rot, &Viewpoint::new(0, 0.0, (az + 90.0) % 360.0), 16).unwrap();
            let b = render_view(&g, &Viewpoint::new(0, 0.0, az), 16).unwrap();
            for (p, q) in a.pixels().iter().zip(b.pixels()) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn silhouette_is_scale_consistent() {
        for (d, s) in [(8, 16), (16, 32)] {
            let g = random_grid(d, 0.05, d as u64);
            for (e, az) in [(0.0, 0.0), (0.0, 90.0), (0.0, 180.0), (0.0, 270.0)] {
                let v = Viewpoint::new(0, e, az);
                let small = render_view(&g, &v, s).unwrap().silhouette();
                let big = render_view(&g, &v, 2 * s).unwrap().silhouette();
                for y in 0..s {
                    for x in 0..s {
                        let pooled = (0..2)
                            .any(|dy| (0..2).any(|dx| big[(2 * y + dy) * 2 * s + 2 * x + dx]));
                        assert_eq!(pooled, small[y * s + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn render_all_parallel_equals_serial() {
        let g = random_grid(8, 0.1, 5);
        let sphere = ViewSphere::canonical();
        let par = render_all(&g, &sphere, 16).unwrap();
        let ser = render_all_serial(&g, &sphere, 16).unwrap();
        assert_eq!(par.len(), 11);
        assert_eq!(par, ser);
        for (i, img) in par.iter().enumerate() {
            assert_eq!(img, &render_view(&g, &sphere.views()[i], 16).unwrap());
        }
    }

    #[test]
    fn augment_contract() {
        let blank = Image::blank(8);
        let a = augment(&blank, 3);
        assert_eq!(a, augment(&blank, 3));
        let color: Vec<f32> = (0..3).map(|c| a.get(c, 0, 0)).collect();
        for (c, &col) in color.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    assert!((a.get(c, y, x) - col).abs() <= 0.04 + 1e-6);
                }
            }
        }

        let mut px = vec![0.0; 3 * 64];
        for c in 0..3 {
            px[c * 64 + 9] = 0.5;
        }
        let img = Image::new(8, px).unwrap();
        for seed in 0..50 {
            let out = augment(&img, seed);
            for c in 0..3 {
                let v = out.get(c, 1, 1);
                assert!((0.48..=0.52).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn augment_keeps_foreground_before_jitter() {
        let g = random_grid(8, 0.1, 2);
        let img = render_view(&g, &Viewpoint::new(0, 30.0, 90.0), 16).unwrap();
        let cfg = AugmentConfig { jitter: 0.0 };
        let out = augment_with(&img, 9, &cfg);
        let sil = img.silhouette();
        for (p, &fg) in sil.iter().enumerate() {
            for c in 0..3 {
                let (y, x) = (p / 16, p % 16);
                if fg {
                    assert_eq!(out.get(c, y, x), img.get(c, y, x));
                } else {
                    assert_eq!(out.get(c, y, x), out.get(c, 0, 0));
                }
            }
        }
    }

    #[test]
    fn ppm_header_and_length() {
        let img = Image::blank(8);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(ppm.len(), b"P6\n8 8\n255\n".len() + 8 * 8 * 3);
    }
}
