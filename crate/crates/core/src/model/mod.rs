//! The five sub-networks and their composition.
//!
//! The selection network is a strided conv trunk followed by a dense head.
//! The trunk's last activation doubles as the encoder output, so the encoder
//! has no weights of its own. A dense projection seeds a `[C,2,2,2]` volume
//! that transposed 3D convolutions grow to `D^3`. Pairs of coarse volumes
//! are fused with per-voxel softmax weights from a small 3D conv score
//! network and refined by a residual conv block on logits.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::render::{Image, CHANNELS};
use crate::voxelgrid::{GridError, VoxelGrid, MAX_RESOLUTION};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, TrainingState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Clamp used when taking logits of fused occupancies.
pub const LOGIT_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image size {got} does not match configured {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("expected {expected} views, got {got}")]
    ViewCount { expected: usize, got: usize },
    #[error("view id {0} out of range")]
    ViewIndex(usize),
    #[error("fusion needs at least one coarse volume")]
    EmptyFusion,
    #[error("volume resolution {got} does not match configured {expected}")]
    Resolution { expected: usize, got: usize },
    #[error("feature shape {got:?} does not match encoder shape {expected:?}")]
    FeatureShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid selection distribution: {0}")]
    Distribution(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint {0}")]
    Corrupt(String),
    #[error("checkpoint tensor '{name}' has shape {found:?}, config expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor set does not match config: {0}")]
    TensorSet(String),
    #[error(
        "checkpoint written for a different config (digest {found:016x}, expected {expected:016x})"
    )]
    Digest { expected: u64, found: u64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ContextAware,
    SimpleAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub resolution: usize,
    pub views: usize,
    /// Output channels of the stride-2 trunk convolutions.
    pub trunk_channels: Vec<usize>,
    pub head_hidden: usize,
    /// Channels of the `2^3` decoder seed volume.
    pub seed_channels: usize,
    /// Channels after each transposed convolution except the last, which
    /// always has one.
    pub decoder_channels: Vec<usize>,
    pub score_channels: usize,
    pub refiner_channels: [usize; 2],
    pub fusion: FusionMode,
    pub include_base_in_candidates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            resolution: 16,
            views: 11,
            trunk_channels: vec![8, 16, 32],
            head_hidden: 16,
            seed_channels: 64,
            decoder_channels: vec![32, 16],
            score_channels: 4,
            refiner_channels: [4, 8],
            fusion: FusionMode::ContextAware,
            include_base_in_candidates: true,
        }
    }
}

impl ModelConfig {
    /// Defaults adjusted to another voxel resolution: one decoder stage per
    /// doubling, halving channels down to a floor of 4.
    pub fn for_resolution(resolution: usize) -> Self {
        let mut cfg = Self {
            resolution,
            ..Self::default()
        };
        let stages = decoder_stages(resolution).unwrap_or(1);
        let mut ch = cfg.seed_channels;
        cfg.decoder_channels = (1..stages)
            .map(|_| {
                ch = (ch / 2).max(4);
                ch
            })
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.views < 2 {
            return bad(format!("need at least 2 views, got {}", self.views));
        }
        if self.trunk_channels.is_empty() {
            return bad("trunk needs at least one stage".into());
        }
        let down = 1usize << self.trunk_channels.len();
        if self.image_size < 8 || !self.image_size.is_multiple_of(down) {
            return bad(format!(
                "image size {} must be >= 8 and divisible by {down}",
                self.image_size
            ));
        }
        let Some(stages) = decoder_stages(self.resolution) else {
            return bad(format!(
                "resolution {} must be a power of two in [4, {MAX_RESOLUTION}]",
                self.resolution
            ));
        };
        if self.decoder_channels.len() + 1 != stages {
            return bad(format!(
                "resolution {} needs {} decoder channel entries, got {}",
                self.resolution,
                stages - 1,
                self.decoder_channels.len()
            ));
        }
        let widths = self
            .trunk_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.refiner_channels)
            .chain([&self.head_hidden, &self.seed_channels, &self.score_channels]);
        if widths.into_iter().any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    /// Shape `[C, H, W]` of the encoder feature map.
    pub fn encoder_shape(&self) -> [usize; 3] {
        let side = self.image_size >> self.trunk_channels.len();
        [*self.trunk_channels.last().unwrap_or(&0), side, side]
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_shape().iter().product()
    }

    pub fn voxels(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Stable text naming everything that fixes parameter shapes.
    pub fn shape_signature(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "D={} S={} K={} trunk={} head={} seed={} decoder={} score={} refiner={}",
            self.resolution,
            self.image_size,
            self.views,
            list(&self.trunk_channels),
            self.head_hidden,
            self.seed_channels,
            list(&self.decoder_channels),
            self.score_channels,
            list(&self.refiner_channels),
        )
    }

    /// First eight bytes of the SHA-256 of [`ModelConfig::shape_signature`].
    pub fn digest(&self) -> u64 {
        let hash = Sha256::digest(self.shape_signature().as_bytes());
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

fn decoder_stages(resolution: usize) -> Option<usize> {
    if !(4..=MAX_RESOLUTION).contains(&resolution) || !resolution.is_power_of_two() {
        return None;
    }
    Some(resolution.trailing_zeros() as usize - 1)
}

/// Probabilities over the candidate views.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionDistribution {
    p: Vec<f64>,
}

impl SelectionDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(ModelError::Distribution("empty".into()));
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(ModelError::Distribution(format!(
                "negative or non-finite entry in {p:?}"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(ModelError::Distribution(format!("sums to {total}")));
        }
        Ok(Self { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// View ids by decreasing probability; equal probabilities keep id order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.p.len()).collect();
        ids.sort_by(|&a, &b| self.p[b].total_cmp(&self.p[a]));
        ids
    }

    pub fn argmax(&self) -> usize {
        self.ranking()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    trunk: Vec<Layer>,
    head: [Layer; 2],
    seed: Layer,
    decoder: Vec<Layer>,
    score: [Layer; 2],
    refiner: [Layer; 4],
}

/// Outputs of one training-time forward pass over all candidate views.
#[derive(Clone, Copy, Debug)]
pub struct CandidateVars {
    /// Selection logits `[1, K]` of the base view.
    pub logits: Var,
    /// Selection probabilities `[K]`.
    pub probs: Var,
    /// Coarse volumes `[K, 1, D, D, D]`.
    pub coarse: Var,
    /// Refined pair reconstructions `[K, 1, D, D, D]`, one per candidate.
    pub volumes: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layers: Layers,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn layer(
        &mut self,
        name: &str,
        w_shape: &[usize],
        b_len: usize,
        fan_in: usize,
        gain: f64,
    ) -> Layer {
        let bound = (gain / fan_in as f64).sqrt();
        let n: usize = w_shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let w = self.store.add(
            format!("{name}.w"),
            Tensor::from_f64(w_shape, &data).expect("valid shape"),
        );
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[b_len]));
        Layer { w, b }
    }
}

/// He-uniform bound numerator for ELU hidden layers.
const HIDDEN_GAIN: f64 = 6.0;
/// Smaller scale for layers feeding a softmax or sigmoid.
const OUTPUT_GAIN: f64 = 1.0;
/// Selection logits start close to zero so the initial distribution is flat.
const POLICY_GAIN: f64 = 1e-4;

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut trunk = Vec::new();
        let mut cin = CHANNELS;
        for (i, &c) in config.trunk_channels.iter().enumerate() {
            trunk.push(init.layer(
                &format!("trunk.{i}"),
                &[c, cin, 3, 3],
                c,
                cin * 9,
                HIDDEN_GAIN,
            ));
            cin = c;
        }
        let enc = config.encoder_len();
        let (hid, k) = (config.head_hidden, config.views);
        let head = [
            init.layer("head.0", &[enc, hid], hid, enc, HIDDEN_GAIN),
            init.layer("head.1", &[hid, k], k, hid, POLICY_GAIN),
        ];
        let seed_len = config.seed_channels * 8;
        let seed_layer = init.layer("decoder.seed", &[enc, seed_len], seed_len, enc, HIDDEN_GAIN);
        let mut decoder = Vec::new();
        let mut cin = config.seed_channels;
        let outs: Vec<usize> = config.decoder_channels.iter().copied().chain([1]).collect();
        for (i, &c) in outs.iter().enumerate() {
            let gain = if i + 1 == outs.len() {
                OUTPUT_GAIN
            } else {
                HIDDEN_GAIN
            };
            decoder.push(init.layer(
                &format!("decoder.{i}"),
                &[cin, c, 4, 4, 4],
                c,
                cin * 8,
                gain,
            ));
            cin = c;
        }
        let sc = config.score_channels;
        let score = [
            init.layer("fusion.0", &[sc, 1, 3, 3, 3], sc, 27, HIDDEN_GAIN),
            init.layer("fusion.1", &[1, sc, 3, 3, 3], 1, sc * 27, OUTPUT_GAIN),
        ];
        let [r0, r1] = config.refiner_channels;
        let refiner = [
            init.layer("refiner.in", &[r0, 1, 3, 3, 3], r0, 27, HIDDEN_GAIN),
            init.layer("refiner.down", &[r1, r0, 3, 3, 3], r1, r0 * 27, HIDDEN_GAIN),
            init.layer("refiner.up", &[r1, r0, 4, 4, 4], r0, r1 * 8, HIDDEN_GAIN),
            init.layer("refiner.out", &[1, r0, 3, 3, 3], 1, r0 * 27, OUTPUT_GAIN),
        ];
        Ok(Self {
            config,
            store,
            layers: Layers {
                trunk,
                head,
                seed: seed_layer,
                decoder,
                score,
                refiner,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the non-shape fields (fusion mode, base masking).
    pub fn set_behaviour(&mut self, fusion: FusionMode, include_base_in_candidates: bool) {
        self.config.fusion = fusion;
        self.config.include_base_in_candidates = include_base_in_candidates;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Sub-network owning a parameter: trunk, head, decoder, fusion or refiner.
    pub fn subnetwork(&self, id: ParamId) -> &str {
        let name = self.store.name(id);
        name.split('.').next().unwrap_or(name)
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.store, id)
    }

    fn conv3(&self, g: &mut Graph<T>, x: Var, l: Layer, stride: usize) -> Result<Var> {
        let (k, b) = (self.p(g, l.w), self.p(g, l.b));
        let y = g.conv3d(x, k, stride)?;
        Ok(g.bias_channels(y, b)?)
    }

    fn up3(&self, g: &mut Graph<T>, x: Var, l: Layer) -> Result<Var> {
        let (k, b) = (self.p(g, l.w), self.p(g, l.b));
        let y = g.tconv3d(x, k)?;
        Ok(g.bias_channels(y, b)?)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, l: Layer) -> Result<Var> {
        let (w, b) = (self.p(g, l.w), self.p(g, l.b));
        Ok(g.dense(x, w, b)?)
    }

    /// Images as a `[B, 3, S, S]` tensor.
    pub fn images_tensor(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * CHANNELS * s * s);
        for img in images {
            if img.size() != s {
                return Err(ModelError::ImageSize {
                    expected: s,
                    got: img.size(),
                });
            }
            data.extend(img.pixels().iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::new(vec![images.len(), CHANNELS, s, s], data)?)
    }

    /// Conv trunk over `[B, 3, S, S]`; the result is the encoder map.
    pub fn trunk_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &l in &self.layers.trunk {
            let (k, b) = (self.p(g, l.w), self.p(g, l.b));
            let y = g.conv2d(h, k, 2)?;
            let y = g.bias_channels(y, b)?;
            h = g.elu(y);
        }
        Ok(h)
    }

    fn flatten(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let batch = g.shape(feat)[0];
        Ok(g.reshape(feat, &[batch, self.config.encoder_len()])?)
    }

    /// Selection logits `[B, K]` from encoder maps.
    pub fn head_graph(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let flat = self.flatten(g, feat)?;
        let h = self.dense(g, flat, self.layers.head[0])?;
        let h = g.elu(h);
        self.dense(g, h, self.layers.head[1])
    }

    /// Coarse occupancy `[B, 1, D, D, D]` from encoder maps.
    pub fn decode_graph(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let batch = g.shape(feat)[0];
        let flat = self.flatten(g, feat)?;
        let s = self.dense(g, flat, self.layers.seed)?;
        let s = g.elu(s);
        let mut h = g.reshape(s, &[batch, self.config.seed_channels, 2, 2, 2])?;
        let last = self.layers.decoder.len() - 1;
        for (i, &l) in self.layers.decoder.iter().enumerate() {
            h = self.up3(g, h, l)?;
            if i != last {
                h = g.elu(h);
            }
        }
        Ok(g.sigmoid(h))
    }

    /// Per-voxel fusion scores `[B, 1, D, D, D]` of coarse volumes.
    pub fn score_graph(&self, g: &mut Graph<T>, coarse: Var) -> Result<Var> {
        let h = self.conv3(g, coarse, self.layers.score[0], 1)?;
        let h = g.elu(h);
        self.conv3(g, h, self.layers.score[1], 1)
    }

    /// Fuses `[1, 1, D, D, D]` coarse volumes. `scores` are only read in
    /// context-aware mode.
    pub fn fuse_graph(
        &self,
        g: &mut Graph<T>,
        coarse: &[Var],
        scores: &[Var],
        mode: FusionMode,
    ) -> Result<Var> {
        if coarse.is_empty() {
            return Err(ModelError::EmptyFusion);
        }
        if coarse.len() == 1 {
            return Ok(coarse[0]);
        }
        match mode {
            FusionMode::SimpleAverage => {
                let mut acc = coarse[0];
                for &c in &coarse[1..] {
                    acc = g.add(acc, c)?;
                }
                Ok(g.scale(acc, T::lit(1.0 / coarse.len() as f64)))
            }
            FusionMode::ContextAware => {
                let weights = self.fusion_weights_graph(g, scores)?;
                let mut acc: Option<Var> = None;
                for (v, &c) in coarse.iter().enumerate() {
                    let w = g.select(weights, v)?;
                    let term = g.mul(w, c)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, term)?,
                        None => term,
                    });
                }
                Ok(acc.expect("non-empty"))
            }
        }
    }

    /// Softmax over the view axis of stacked scores: `[V, 1, 1, D, D, D]`.
    pub fn fusion_weights_graph(&self, g: &mut Graph<T>, scores: &[Var]) -> Result<Var> {
        let stacked = g.stack(scores)?;
        Ok(g.softmax_axis(stacked, 0)?)
    }

    /// Residual refinement of `[B, 1, D, D, D]` fused occupancies.
    pub fn refine_graph(&self, g: &mut Graph<T>, fused: Var) -> Result<Var> {
        let [l_in, l_down, l_up, l_out] = self.layers.refiner;
        let h1 = self.conv3(g, fused, l_in, 1)?;
        let h1 = g.elu(h1);
        let h2 = self.conv3(g, h1, l_down, 2)?;
        let h2 = g.elu(h2);
        let u = self.up3(g, h2, l_up)?;
        let u = g.add(u, h1)?;
        let u = g.elu(u);
        let delta = self.conv3(g, u, l_out, 1)?;
        let base = g.logit(fused, T::lit(LOGIT_EPS));
        let z = g.add(base, delta)?;
        Ok(g.sigmoid(z))
    }

    fn base_mask(&self, base: usize) -> Option<Tensor<T>> {
        if self.config.include_base_in_candidates {
            return None;
        }
        let mut m = vec![T::zero(); self.config.views];
        m[base] = T::neg_infinity();
        Some(Tensor::new(vec![1, self.config.views], m).expect("shape"))
    }

    /// Selection probabilities `[K]` from logits `[1, K]`, masking the base
    /// view when it is excluded from the candidates.
    pub fn probs_graph(&self, g: &mut Graph<T>, logits: Var, base: Option<usize>) -> Result<Var> {
        let masked = match base.and_then(|b| self.base_mask(b)) {
            Some(mask) => {
                let m = g.constant(mask);
                g.add(logits, m)?
            }
            None => logits,
        };
        let p = g.softmax(masked);
        Ok(g.reshape(p, &[self.config.views])?)
    }

    /// Full candidate pass: every view is encoded and decoded once, each
    /// candidate is fused with the base and all pairs are refined together.
    pub fn candidates_graph(
        &self,
        g: &mut Graph<T>,
        views: Var,
        base: usize,
    ) -> Result<CandidateVars> {
        let k = self.config.views;
        let d = self.config.resolution;
        let vs = g.shape(views).to_vec();
        if vs[0] != k {
            return Err(ModelError::ViewCount {
                expected: k,
                got: vs[0],
            });
        }
        if base >= k {
            return Err(ModelError::ViewIndex(base));
        }
        let feats = self.trunk_graph(g, views)?;
        let enc = self.config.encoder_shape();
        let base_feat = g.select(feats, base)?;
        let base_feat = g.reshape(base_feat, &[1, enc[0], enc[1], enc[2]])?;
        let logits = self.head_graph(g, base_feat)?;
        let probs = self.probs_graph(g, logits, Some(base))?;

        let coarse = self.decode_graph(g, feats)?;
        let unit = [1, 1, d, d, d];
        let scores = match self.config.fusion {
            FusionMode::ContextAware => Some(self.score_graph(g, coarse)?),
            FusionMode::SimpleAverage => None,
        };
        let pick = |g: &mut Graph<T>, x: Var, i: usize| -> Result<Var> {
            let s = g.select(x, i)?;
            Ok(g.reshape(s, &unit)?)
        };
        let c_base = pick(g, coarse, base)?;
        let s_base = match scores {
            Some(s) => Some(pick(g, s, base)?),
            None => None,
        };
        let mut fused = Vec::with_capacity(k);
        for i in 0..k {
            let c_i = pick(g, coarse, i)?;
            let pair_scores = match (scores, s_base) {
                (Some(s), Some(sb)) => vec![sb, pick(g, s, i)?],
                _ => Vec::new(),
            };
            fused.push(self.fuse_graph(g, &[c_base, c_i], &pair_scores, self.config.fusion)?);
        }
        let fused = g.stack(&fused)?;
        let fused = g.reshape(fused, &[k, 1, d, d, d])?;
        let volumes = self.refine_graph(g, fused)?;
        Ok(CandidateVars {
            logits,
            probs,
            coarse,
            volumes,
        })
    }

    fn volume_tensor(&self, grid: &VoxelGrid) -> Result<Tensor<T>> {
        let d = self.config.resolution;
        if grid.resolution() != d {
            return Err(ModelError::Resolution {
                expected: d,
                got: grid.resolution(),
            });
        }
        let data = grid.values().iter().map(|&v| T::lit(v as f64)).collect();
        Ok(Tensor::new(vec![1, 1, d, d, d], data)?)
    }

    fn to_grid(&self, values: &[T]) -> Result<VoxelGrid> {
        let vals = values.iter().map(|v| v.as_f64() as f32).collect();
        Ok(VoxelGrid::new(self.config.resolution, vals)?)
    }

    /// Selection distribution for a single image, without base masking.
    pub fn nvs_forward(&self, img: &Image) -> Result<SelectionDistribution> {
        Ok(self.nvs_forward_traced(img, None)?.0)
    }

    /// Selection distribution plus the trunk activation it was computed from.
    pub fn nvs_forward_traced(
        &self,
        img: &Image,
        base: Option<usize>,
    ) -> Result<(SelectionDistribution, Tensor<T>)> {
        let mut g = Graph::inference();
        let x = g.constant(self.images_tensor(&[img])?);
        let feat = self.trunk_graph(&mut g, x)?;
        let logits = self.head_graph(&mut g, feat)?;
        let p = self.probs_graph(&mut g, logits, base)?;
        let dist = SelectionDistribution::new(g.value(p).to_f64())?;
        let [c, h, w] = self.config.encoder_shape();
        Ok((dist, g.value(feat).clone().reshape(&[c, h, w])?))
    }

    /// Encoder map `[C, H, W]`.
    pub fn encode(&self, img: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(self.images_tensor(&[img])?);
        let feat = self.trunk_graph(&mut g, x)?;
        let [c, h, w] = self.config.encoder_shape();
        Ok(g.value(feat).clone().reshape(&[c, h, w])?)
    }

    pub fn decode(&self, feat: &Tensor<T>) -> Result<VoxelGrid> {
        let enc = self.config.encoder_shape();
        if feat.shape() != enc {
            return Err(ModelError::FeatureShape {
                expected: enc.to_vec(),
                got: feat.shape().to_vec(),
            });
        }
        let mut g = Graph::inference();
        let f = g.constant(feat.clone().reshape(&[1, enc[0], enc[1], enc[2]])?);
        let coarse = self.decode_graph(&mut g, f)?;
        self.to_grid(g.data(coarse))
    }

    fn fuse_inputs(
        &self,
        g: &mut Graph<T>,
        coarse: &[VoxelGrid],
        mode: FusionMode,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if coarse.is_empty() {
            return Err(ModelError::EmptyFusion);
        }
        let mut cs = Vec::new();
        let mut ss = Vec::new();
        for c in coarse {
            let v = g.constant(self.volume_tensor(c)?);
            if mode == FusionMode::ContextAware {
                ss.push(self.score_graph(g, v)?);
            }
            cs.push(v);
        }
        Ok((cs, ss))
    }

    /// Fuses coarse volumes with the configured mode.
    pub fn fuse(&self, coarse: &[VoxelGrid]) -> Result<VoxelGrid> {
        self.fuse_with(coarse, self.config.fusion)
    }

    pub fn fuse_with(&self, coarse: &[VoxelGrid], mode: FusionMode) -> Result<VoxelGrid> {
        let mut g = Graph::inference();
        let (cs, ss) = self.fuse_inputs(&mut g, coarse, mode)?;
        let fused = self.fuse_graph(&mut g, &cs, &ss, mode)?;
        self.to_grid(g.data(fused))
    }

    /// Context-aware per-view weights, `weights[v][voxel]`.
    pub fn fusion_weights(&self, coarse: &[VoxelGrid]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let (_, ss) = self.fuse_inputs(&mut g, coarse, FusionMode::ContextAware)?;
        let w = self.fusion_weights_graph(&mut g, &ss)?;
        Ok(g.value(w)
            .to_f64()
            .chunks(self.config.voxels())
            .map(<[f64]>::to_vec)
            .collect())
    }

    pub fn refine(&self, fused: &VoxelGrid) -> Result<VoxelGrid> {
        let mut g = Graph::inference();
        let f = g.constant(self.volume_tensor(fused)?);
        let out = self.refine_graph(&mut g, f)?;
        self.to_grid(g.data(out))
    }

    /// `refine(fuse([decode(encode(base)), decode(encode(cand))]))`.
    pub fn reconstruct_pair(&self, base: &Image, cand: &Image) -> Result<VoxelGrid> {
        let mut g = Graph::inference();
        let x = g.constant(self.images_tensor(&[base, cand])?);
        let feats = self.trunk_graph(&mut g, x)?;
        let coarse = self.decode_graph(&mut g, feats)?;
        let d = self.config.resolution;
        let mut cs = Vec::new();
        for i in 0..2 {
            let c = g.select(coarse, i)?;
            cs.push(g.reshape(c, &[1, 1, d, d, d])?);
        }
        let mut ss = Vec::new();
        if self.config.fusion == FusionMode::ContextAware {
            for &c in &cs {
                ss.push(self.score_graph(&mut g, c)?);
            }
        }
        let fused = self.fuse_graph(&mut g, &cs, &ss, self.config.fusion)?;
        let out = self.refine_graph(&mut g, fused)?;
        self.to_grid(g.data(out))
    }

    /// Selection distribution for `base` and the reconstruction paired with
    /// every candidate view, from one batched forward pass.
    pub fn candidate_volumes(
        &self,
        views: &[Image],
        base: usize,
    ) -> Result<(SelectionDistribution, Vec<VoxelGrid>)> {
        let mut g = Graph::inference();
        let refs: Vec<&Image> = views.iter().collect();
        let x = g.constant(self.images_tensor(&refs)?);
        let out = self.candidates_graph(&mut g, x, base)?;
        let dist = SelectionDistribution::new(g.value(out.probs).to_f64())?;
        let vols = g
            .data(out.volumes)
            .chunks(self.config.voxels())
            .map(|c| self.to_grid(c))
            .collect::<Result<Vec<_>>>()?;
        Ok((dist, vols))
    }
}

#[cfg(test)]
mod tests;
