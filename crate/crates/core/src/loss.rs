//! Probability-weighted mixture volume and voxelwise binary cross entropy.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Scalar, Var};
use crate::model::SelectionDistribution;
use crate::voxelgrid::{BinaryGrid, GridError, VoxelGrid};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{weights} weights for {volumes} volumes")]
    Count { weights: usize, volumes: usize },
    #[error("resolution mismatch: {0} vs {1}")]
    Resolution(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureResult {
    pub r: VoxelGrid,
    pub components: Vec<VoxelGrid>,
    pub weights: SelectionDistribution,
}

/// `r = sum_i p_i v_i` of `p[K]` and `volumes[K, ...]`.
pub fn mixture_graph<T: Scalar>(g: &mut Graph<T>, p: Var, volumes: Var) -> Result<Var> {
    let (k, n) = (g.shape(p).iter().product::<usize>(), g.shape(volumes)[0]);
    if k != n {
        return Err(LossError::Count {
            weights: k,
            volumes: n,
        });
    }
    Ok(g.mix(p, volumes)?)
}

/// Mean clamped binary cross entropy of `r` against `truth`.
pub fn bce_graph<T: Scalar>(g: &mut Graph<T>, r: Var, truth: &BinaryGrid) -> Result<Var> {
    let n = g.value(r).numel();
    if n != truth.bits().len() {
        return Err(LossError::Resolution(n, truth.bits().len()));
    }
    Ok(g.bce(r, &target(truth), T::lit(BCE_EPS))?)
}

pub fn target<T: Scalar>(truth: &BinaryGrid) -> Vec<T> {
    truth
        .bits()
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect()
}

pub fn mixture(p: &SelectionDistribution, volumes: &[VoxelGrid]) -> Result<MixtureResult> {
    if p.len() != volumes.len() || volumes.is_empty() {
        return Err(LossError::Count {
            weights: p.len(),
            volumes: volumes.len(),
        });
    }
    let d = volumes[0].resolution();
    let mut r = vec![0.0f64; volumes[0].len()];
    for (&w, v) in p.probs().iter().zip(volumes) {
        if v.resolution() != d {
            return Err(LossError::Resolution(d, v.resolution()));
        }
        for (acc, &x) in r.iter_mut().zip(v.values()) {
            *acc += w * x as f64;
        }
    }
    let r = r.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(MixtureResult {
        r: VoxelGrid::new(d, r)?,
        components: volumes.to_vec(),
        weights: p.clone(),
    })
}

pub fn bce(r: &VoxelGrid, truth: &BinaryGrid) -> Result<f64> {
    if r.resolution() != truth.resolution() {
        return Err(LossError::Resolution(r.resolution(), truth.resolution()));
    }
    let mut total = 0.0;
    for (&p, &t) in r.values().iter().zip(truth.bits()) {
        let c = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += if t { c.ln() } else { (1.0 - c).ln() };
    }
    Ok(-total / r.len() as f64)
}
