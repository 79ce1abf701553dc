//! Camera positions on the unit view sphere.
//!
//! Elevation is measured from the xy-plane towards +z, azimuth counter-clockwise
//! from +x. A view's unit position is
//! `(cos e cos a, cos e sin a, sin e)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of views on the canonical sphere.
pub const CANONICAL_VIEW_COUNT: usize = 11;

/// Canonical ring layout as `(elevation, [azimuths])`, listed in id order.
const CANONICAL_RINGS: [(f64, &[f64]); 3] = [
    (60.0, &[0.0, 120.0, 240.0]),
    (30.0, &[0.0, 90.0, 180.0, 270.0]),
    (0.0, &[0.0, 45.0, 90.0, 135.0]),
];

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("view {0} is not on this sphere")]
    UnknownView(usize),
    #[error("no view is available")]
    NoAvailableView,
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid view sphere: {0}")]
    Invalid(String),
    #[error("view sphere file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ViewError>;

/// `(cos, sin)` of an angle in degrees, exact at multiples of 90 degrees.
pub fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let rad = r.to_radians();
        (rad.cos(), rad.sin())
    }
}

pub fn unit_direction(elevation_deg: f64, azimuth_deg: f64) -> [f64; 3] {
    let (ce, se) = cos_sin_deg(elevation_deg);
    let (ca, sa) = cos_sin_deg(azimuth_deg);
    [ce * ca, ce * sa, se]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

impl Viewpoint {
    pub fn new(id: usize, elevation_deg: f64, azimuth_deg: f64) -> Self {
        Self {
            id,
            elevation_deg,
            azimuth_deg,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        unit_direction(self.elevation_deg, self.azimuth_deg)
    }
}

/// Euclidean distance between the unit positions of two views, in `[0, 2]`.
pub fn chord_distance(a: &Viewpoint, b: &Viewpoint) -> f64 {
    distance(a.position(), b.position())
}

/// Ordered set of views with ids `0..n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ViewSphere {
    views: Vec<Viewpoint>,
}

impl ViewSphere {
    /// Validates ids, elevation/azimuth ranges, pole exclusion and that no two
    /// views are antipodal.
    pub fn new(views: Vec<Viewpoint>) -> Result<Self> {
        if views.is_empty() {
            return Err(ViewError::Invalid("no views".into()));
        }
        for (i, v) in views.iter().enumerate() {
            if v.id != i {
                return Err(ViewError::Invalid(format!(
                    "view at position {i} has id {}, ids must be 0..n in order",
                    v.id
                )));
            }
            if !v.elevation_deg.is_finite() || !v.azimuth_deg.is_finite() {
                return Err(ViewError::Invalid(format!(
                    "view {i} has non-finite angles"
                )));
            }
            if v.elevation_deg.abs() >= 90.0 {
                return Err(ViewError::Invalid(format!(
                    "view {i} at elevation {} is a pole or beyond",
                    v.elevation_deg
                )));
            }
            if !(0.0..360.0).contains(&v.azimuth_deg) {
                return Err(ViewError::Invalid(format!(
                    "view {i} azimuth {} outside [0, 360)",
                    v.azimuth_deg
                )));
            }
        }
        for (i, a) in views.iter().enumerate() {
            let pa = a.position();
            for b in &views[i + 1..] {
                let pb = b.position();
                let neg = [-pb[0], -pb[1], -pb[2]];
                if distance(pa, neg) < 1e-9 {
                    return Err(ViewError::Invalid(format!(
                        "views {} and {} are antipodal",
                        a.id, b.id
                    )));
                }
                if distance(pa, pb) < 1e-9 {
                    return Err(ViewError::Invalid(format!(
                        "views {} and {} coincide",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(Self { views })
    }

    /// Three views at 60 degrees elevation, four at 30 and four on the
    /// equator, ids assigned in that order.
    pub fn canonical() -> Self {
        let mut views = Vec::with_capacity(CANONICAL_VIEW_COUNT);
        for (elev, azimuths) in CANONICAL_RINGS {
            for &az in azimuths {
                views.push(Viewpoint::new(views.len(), elev, az));
            }
        }
        Self { views }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let views: Vec<Viewpoint> = serde_json::from_str(text)?;
        Self::new(views)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.views).expect("viewpoints serialize")
    }

    pub fn views(&self) -> &[Viewpoint] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Viewpoint> {
        self.views.get(id).ok_or(ViewError::UnknownView(id))
    }

    /// Index of the first view exactly matching `(elevation, azimuth)`.
    pub fn find(&self, elevation_deg: f64, azimuth_deg: f64) -> Option<usize> {
        self.views
            .iter()
            .position(|v| v.elevation_deg == elevation_deg && v.azimuth_deg == azimuth_deg)
    }
}

impl Default for ViewSphere {
    fn default() -> Self {
        Self::canonical()
    }
}

impl<'de> Deserialize<'de> for ViewSphere {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let views = Vec::<Viewpoint>::deserialize(d)?;
        ViewSphere::new(views).map_err(serde::de::Error::custom)
    }
}

/// The view farthest (by chord distance) from `base`, lowest id on ties.
pub fn farthest_view<'a>(base: &Viewpoint, sphere: &'a ViewSphere) -> Result<&'a Viewpoint> {
    let member = sphere.get(base.id)?;
    if member != base {
        return Err(ViewError::UnknownView(base.id));
    }
    let mut best: Option<(&Viewpoint, f64)> = None;
    for v in sphere.views.iter().filter(|v| v.id != base.id) {
        let d = chord_distance(base, v);
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((v, d));
        }
    }
    best.map(|(v, _)| v).ok_or(ViewError::NoAvailableView)
}

/// `argmax_i avail_i * probs_i`, lowest index on ties.
///
/// Unavailable entries never win, even when every available probability is
/// zero.
pub fn masked_argmax(probs: &[f64], avail: &[bool]) -> Result<usize> {
    if probs.len() != avail.len() {
        return Err(ViewError::LengthMismatch {
            expected: probs.len(),
            got: avail.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (&p, &a)) in probs.iter().zip(avail).enumerate() {
        if a && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i).ok_or(ViewError::NoAvailableView)
}

/// The view whose position is closest to the given direction, lowest id on ties.
pub fn nearest_view(elevation_deg: f64, azimuth_deg: f64, sphere: &ViewSphere) -> &Viewpoint {
    let q = unit_direction(elevation_deg, azimuth_deg);
    let mut best = &sphere.views[0];
    let mut best_d = distance(q, best.position());
    for v in &sphere.views[1..] {
        let d = distance(q, v.position());
        if d < best_d {
            best = v;
            best_d = d;
        }
    }
    best
}
