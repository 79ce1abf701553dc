use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::OptimizerKind;
use crate::render::{self, Image};
use crate::shapes::{generate_shape, ShapeClass};
use crate::viewsphere::ViewSphere;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        resolution: 8,
        trunk_channels: vec![4, 8],
        head_hidden: 8,
        seed_channels: 8,
        decoder_channels: vec![4],
        score_channels: 2,
        refiner_channels: [2, 3],
        ..ModelConfig::default()
    }
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..3 * size * size).map(|_| rng.gen::<f32>()).collect();
    Image::new(size, px).unwrap()
}

fn shape_views(
    cfg: &ModelConfig,
    class: ShapeClass,
    seed: u64,
) -> (crate::voxelgrid::BinaryGrid, Vec<Image>) {
    let grid = generate_shape(class, seed, cfg.resolution).unwrap();
    let views = render::render_all(&grid, &ViewSphere::canonical(), cfg.image_size).unwrap();
    (grid, views)
}

#[test]
fn default_config_is_valid() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.encoder_shape(), [32, 4, 4]);
    let big = ModelConfig::for_resolution(32);
    big.validate().unwrap();
    assert_eq!(big.decoder_channels, vec![32, 16, 8]);
    assert_eq!(ModelConfig::for_resolution(16), cfg);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        ModelConfig {
            resolution: 12,
            ..ModelConfig::default()
        },
        ModelConfig {
            image_size: 20,
            ..ModelConfig::default()
        },
        ModelConfig {
            decoder_channels: vec![8],
            ..ModelConfig::default()
        },
        ModelConfig {
            views: 1,
            ..ModelConfig::default()
        },
        ModelConfig {
            head_hidden: 0,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(
            Model::<f32>::new(cfg, 0),
            Err(ModelError::Config(_))
        ));
    }
}

#[test]
fn selection_distribution_contract() {
    let m = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    for seed in 0..5 {
        let img = random_image(32, seed);
        let d = m.nvs_forward(&img).unwrap();
        assert_eq!(d.len(), 11);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(d.probs().iter().all(|&p| p >= 0.0));
        assert_eq!(d, m.nvs_forward(&img).unwrap());
        let max = d.probs().iter().cloned().fold(0.0, f64::max);
        let min = d.probs().iter().cloned().fold(1.0, f64::min);
        assert!(max / min < 10.0, "ratio {}", max / min);
    }
    assert!(matches!(
        m.nvs_forward(&random_image(16, 0)),
        Err(ModelError::ImageSize {
            expected: 32,
            got: 16
        })
    ));
}

#[test]
fn ranking_breaks_ties_by_id() {
    let d = SelectionDistribution::new(vec![0.1, 0.7, 0.2, 0.0]).unwrap();
    assert_eq!(d.ranking(), vec![1, 2, 0, 3]);
    let t = SelectionDistribution::new(vec![0.25; 4]).unwrap();
    assert_eq!(t.ranking(), vec![0, 1, 2, 3]);
    assert!(SelectionDistribution::new(vec![0.5, 0.6]).is_err());
    assert!(SelectionDistribution::new(vec![1.5, -0.5]).is_err());
}

#[test]
fn encoder_is_the_trunk_activation() {
    let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let img = random_image(32, 9);
    let feat = m.encode(&img).unwrap();
    let (_, traced) = m.nvs_forward_traced(&img, None).unwrap();
    assert_eq!(feat.shape(), &[32, 4, 4]);
    assert_eq!(feat, traced);
}

#[test]
fn trunk_perturbation_reaches_both_paths() {
    let mut m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let img = random_image(32, 2);
    let (f0, p0) = (m.encode(&img).unwrap(), m.nvs_forward(&img).unwrap());
    let id = m.store().find("trunk.0.w").unwrap();
    m.store_mut().value_mut(id).data_mut()[5] += 0.5;
    let (f1, p1) = (m.encode(&img).unwrap(), m.nvs_forward(&img).unwrap());
    assert_ne!(f0, f1);
    assert_ne!(p0, p1);
}

#[test]
fn decoder_shape_and_range() {
    let m = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    let v = m.decode(&m.encode(&random_image(32, 1)).unwrap()).unwrap();
    assert_eq!(v.resolution(), 16);
    assert!(v.values().iter().all(|&x| x > 0.0 && x < 1.0));
    assert!(m.decode(&Tensor::zeros(&[32, 2, 2])).is_err());
}

#[test]
fn decoder_zero_features_give_bias_only_output() {
    let mut m = Model::<f64>::new(ModelConfig::default(), 4).unwrap();
    let zero = Tensor::zeros(&[32, 4, 4]);
    // fresh biases are zero, so every logit is zero
    assert!(m.decode(&zero).unwrap().values().iter().all(|&v| v == 0.5));
    let last = m.store().find("decoder.2.b").unwrap();
    m.store_mut().value_mut(last).data_mut()[0] = 1.3;
    let expected = (1.0 / (1.0 + (-1.3f64).exp())) as f32;
    assert!(m
        .decode(&zero)
        .unwrap()
        .values()
        .iter()
        .all(|&v| v == expected));
}

#[test]
fn fusion_contracts() {
    let m = Model::<f64>::new(ModelConfig::default(), 2).unwrap();
    let a = VoxelGrid::filled(16, 0.2).unwrap();
    let b = VoxelGrid::filled(16, 0.6).unwrap();
    for mode in [FusionMode::ContextAware, FusionMode::SimpleAverage] {
        assert_eq!(m.fuse_with(std::slice::from_ref(&a), mode).unwrap(), a);
    }
    let avg = m
        .fuse_with(&[a.clone(), b.clone()], FusionMode::SimpleAverage)
        .unwrap();
    assert!(avg.values().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    let (grid, _) = shape_views(m.config(), ShapeClass::Chair, 0);
    let c = VoxelGrid::from(&grid);
    let w = m.fusion_weights(&[a, b, c]).unwrap();
    assert_eq!(w.len(), 3);
    for j in 0..m.config().voxels() {
        let s: f64 = w.iter().map(|wv| wv[j]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(matches!(m.fuse(&[]), Err(ModelError::EmptyFusion)));
    assert!(matches!(
        m.fuse(&[VoxelGrid::filled(8, 0.1).unwrap()]),
        Err(ModelError::Resolution { .. })
    ));
}

#[test]
fn zeroed_refiner_is_identity() {
    let mut m = Model::<f64>::new(ModelConfig::default(), 5).unwrap();
    let fused = m.decode(&m.encode(&random_image(32, 3)).unwrap()).unwrap();
    let out = m.refine(&fused).unwrap();
    assert_eq!(out.resolution(), 16);
    assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
    let ids: Vec<_> = m
        .store()
        .ids()
        .filter(|&id| m.subnetwork(id) == "refiner")
        .collect();
    assert_eq!(ids.len(), 8);
    for id in ids {
        m.store_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let same = m.refine(&fused).unwrap();
    for (a, b) in same.values().iter().zip(fused.values()) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn pair_loss(m: &Model<f64>, g: &mut Graph<f64>, base: &Image, cand: &Image, truth: &[f64]) -> Var {
    let x = g.constant(m.images_tensor(&[base, cand]).unwrap());
    let feats = m.trunk_graph(g, x).unwrap();
    let coarse = m.decode_graph(g, feats).unwrap();
    let scores = m.score_graph(g, coarse).unwrap();
    let d = m.config().resolution;
    let pick = |g: &mut Graph<f64>, v: Var, i| {
        let s = g.select(v, i).unwrap();
        g.reshape(s, &[1, 1, d, d, d]).unwrap()
    };
    let cs = [pick(g, coarse, 0), pick(g, coarse, 1)];
    let ss = [pick(g, scores, 0), pick(g, scores, 1)];
    let fused = m.fuse_graph(g, &cs, &ss, FusionMode::ContextAware).unwrap();
    let out = m.refine_graph(g, fused).unwrap();
    g.bce(out, truth, 1e-7).unwrap()
}

#[test]
fn refiner_weight_gradient_matches_finite_difference() {
    let cfg = small_config();
    let mut m = Model::<f64>::new(cfg.clone(), 8).unwrap();
    let (grid, views) = shape_views(&cfg, ShapeClass::Table, 2);
    let truth: Vec<f64> = grid.bits().iter().map(|&b| b as u8 as f64).collect();
    let mut g = Graph::new();
    let loss = pair_loss(&m, &mut g, &views[7], &views[3], &truth);
    let mut store = m.store().clone();
    g.backward(loss, &mut store).unwrap();
    let h = 1e-5;
    for name in ["refiner.down.w", "refiner.out.w", "refiner.up.w"] {
        let id = m.store().find(name).unwrap();
        for idx in [0usize, 7, 11] {
            let eval = |m: &Model<f64>| {
                let mut g = Graph::inference();
                let l = pair_loss(m, &mut g, &views[7], &views[3], &truth);
                g.data(l)[0]
            };
            let orig = m.store().value(id).data()[idx];
            m.store_mut().value_mut(id).data_mut()[idx] = orig + h;
            let up = eval(&m);
            m.store_mut().value_mut(id).data_mut()[idx] = orig - h;
            let down = eval(&m);
            m.store_mut().value_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = store.grad(id).data()[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn every_reconstruction_subnetwork_gets_gradient() {
    let cfg = ModelConfig::default();
    let m = Model::<f64>::new(cfg.clone(), 6).unwrap();
    let (grid, views) = shape_views(&cfg, ShapeClass::Chair, 4);
    let truth: Vec<f64> = grid.bits().iter().map(|&b| b as u8 as f64).collect();
    let mut g = Graph::new();
    let loss = pair_loss(&m, &mut g, &views[7], &views[1], &truth);
    let mut store = m.store().clone();
    g.backward(loss, &mut store).unwrap();
    for net in ["trunk", "decoder", "fusion", "refiner"] {
        let reached = store
            .ids()
            .filter(|&id| m.subnetwork(id) == net)
            .any(|id| store.grad(id).data().iter().any(|&v| v != 0.0));
        assert!(reached, "{net} received no gradient");
    }
}

#[test]
fn reconstruct_pair_composition() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::new(cfg.clone(), 7).unwrap();
    let (_, views) = shape_views(&cfg, ShapeClass::Tower, 1);
    let same = m.reconstruct_pair(&views[7], &views[7]).unwrap();
    let coarse = m.decode(&m.encode(&views[7]).unwrap()).unwrap();
    let manual = m
        .refine(&m.fuse(&[coarse.clone(), coarse]).unwrap())
        .unwrap();
    for (a, b) in same.values().iter().zip(manual.values()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(same, m.reconstruct_pair(&views[7], &views[7]).unwrap());
}

#[test]
fn batched_candidates_match_pairwise() {
    for fusion in [FusionMode::ContextAware, FusionMode::SimpleAverage] {
        let cfg = ModelConfig {
            fusion,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg.clone(), 11).unwrap();
        let (_, views) = shape_views(&cfg, ShapeClass::Plane, 3);
        let (dist, vols) = m.candidate_volumes(&views, 7).unwrap();
        assert_eq!(vols.len(), 11);
        assert_eq!(dist, m.nvs_forward(&views[7]).unwrap());
        for (i, v) in vols.iter().enumerate() {
            let pair = m.reconstruct_pair(&views[7], &views[i]).unwrap();
            for (a, b) in v.values().iter().zip(pair.values()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn excluded_base_gets_zero_probability() {
    let cfg = ModelConfig {
        include_base_in_candidates: false,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let (_, views) = shape_views(&cfg, ShapeClass::Lshape, 0);
    let (dist, _) = m.candidate_volumes(&views, 4).unwrap();
    assert_eq!(dist.probs()[4], 0.0);
    assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_ne!(dist.argmax(), 4);
}

fn trained_state(m: &Model<f32>) -> TrainingState {
    let mut opt = crate::autodiff::Optimizer::new(OptimizerKind::Adam, 1e-3, m.store());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in opt
        .first_moment
        .iter_mut()
        .chain(opt.second_moment.iter_mut())
    {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen());
    }
    opt.step = 17;
    TrainingState {
        optimizer: opt,
        epochs_completed: 3,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = Model::<f32>::new(ModelConfig::default(), 21).unwrap();
    let state = trained_state(&m);
    for st in [None, Some(&state)] {
        let bytes = checkpoint_to_bytes(&m, st);
        assert_eq!(&bytes[..4], b"NVSM");
        let (back, back_state) = checkpoint_from_bytes(&bytes, m.config()).unwrap();
        assert_eq!(back.store(), m.store());
        assert_eq!(back_state.as_ref(), st);
        assert_eq!(checkpoint_to_bytes(&back, back_state.as_ref()), bytes);
    }
    let sgd = TrainingState {
        optimizer: crate::autodiff::Optimizer::sgd(0.1),
        epochs_completed: 1,
    };
    let bytes = checkpoint_to_bytes(&m, Some(&sgd));
    assert_eq!(
        checkpoint_from_bytes(&bytes, m.config()).unwrap().1,
        Some(sgd)
    );
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let m = Model::<f32>::new(ModelConfig::default(), 21).unwrap();
    let bytes = checkpoint_to_bytes(&m, None);
    let other = ModelConfig {
        head_hidden: 32,
        ..ModelConfig::default()
    };
    assert!(matches!(
        checkpoint_from_bytes(&bytes, &other),
        Err(ModelError::TensorShape { .. })
    ));
    let fewer = ModelConfig::for_resolution(32);
    assert!(checkpoint_from_bytes(&bytes, &fewer).is_err());
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = Model::<f32>::new(small_config(), 2).unwrap();
    let cfg = m.config().clone();
    let bytes = checkpoint_to_bytes(&m, None);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        checkpoint_from_bytes(&bad, &cfg),
        Err(ModelError::BadMagic)
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        checkpoint_from_bytes(&bad, &cfg),
        Err(ModelError::Version(9))
    ));
    // first record's name length
    let mut bad = bytes.clone();
    bad[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(
        checkpoint_from_bytes(&bad, &cfg),
        Err(ModelError::Truncated(_))
    ));
    assert!(matches!(
        checkpoint_from_bytes(&bytes[..bytes.len() - 3], &cfg),
        Err(ModelError::Truncated(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        checkpoint_from_bytes(&extra, &cfg),
        Err(ModelError::Corrupt(_))
    ));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_checkpoint(&dir.path().join("none.nvsm"), &ModelConfig::default()).unwrap_err();
    assert!(err.to_string().starts_with("checkpoint not found"));
}
