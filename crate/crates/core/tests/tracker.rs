use gdt_core::container::{self, Tensor, TensorMap};
use gdt_core::nn::{init_network, save_weights};
use gdt_core::sampler::{sample_negatives, sample_positives};
use gdt_core::tracker::{load_state, save_state, state_from_tensors, state_tensors};
use gdt_core::{
    crop_resize, iou, AppearanceModel, BoundingBox, ConvStage, FeatureVector, ImageBuffer, ImageDims, Network, NetworkConfig,
    SamplerConfig, Tracker, TrackerConfig, TrackerError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 160;
const H: usize = 120;

fn net_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        conv_spec: vec![ConvStage::new(5, 1, 4), ConvStage::new(3, 1, 8)],
        fc6_dim: 16,
        feature_dim: 8,
        seed: 5,
        ..NetworkConfig::default()
    }
}

fn net() -> Network {
    init_network(&net_config(), 5).unwrap()
}

fn config() -> TrackerConfig {
    TrackerConfig {
        sampler: SamplerConfig {
            n_pos: 8,
            n_neg: 16,
            n_candidates: 40,
            rng_seed: 3,
            ..SamplerConfig::default()
        },
        init_iterations: 40,
        ..TrackerConfig::default()
    }
}

fn target() -> BoundingBox {
    BoundingBox::new(60.0, 40.0, 30.0, 20.0).unwrap()
}

/// Smooth ramp background with a blocky textured target at `at`.
fn scene(at: BoundingBox, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // texture is fixed across frames; only the pixel noise depends on `seed`
    let mut tex = ChaCha8Rng::seed_from_u64(99);
    let levels: Vec<u8> = (0..64).map(|_| if tex.gen_bool(0.5) { 30 } else { 220 }).collect();
    let mut img = ImageBuffer::filled(W, H, 1, 0).unwrap();
    for y in 0..H {
        for x in 0..W {
            let inside = x as f64 >= at.x && (x as f64) < at.right() && y as f64 >= at.y && (y as f64) < at.bottom();
            let v = if inside {
                let (bx, by) = ((x as f64 - at.x) as usize / 5, (y as f64 - at.y) as usize / 5);
                levels[by * 8 + bx] as f64
            } else {
                100.0 + 0.3 * x as f64 + 0.2 * y as f64
            };
            img.set(x, y, 0, (v + rng.gen_range(-4.0..4.0)).clamp(0.0, 255.0) as u8);
        }
    }
    img
}

fn moved(b: BoundingBox, dx: f64, dy: f64) -> BoundingBox {
    BoundingBox::new(b.x + dx, b.y + dy, b.w, b.h).unwrap()
}

fn features(net: &Network, frame: &ImageBuffer, boxes: &[BoundingBox]) -> Vec<FeatureVector> {
    boxes
        .iter()
        .map(|b| net.forward_features(&crop_resize(frame, b, 32, 32).unwrap()).unwrap().0)
        .collect()
}

fn encoded<T: gdt_core::Scalar>(s: &gdt_core::tracker::TrackerState<T>) -> Vec<u8> {
    container::encode(&state_tensors(s)).unwrap()
}

#[test]
fn zero_init_iterations_keeps_net_and_fits_raw_features() {
    let frame = scene(target(), 1);
    let cfg = TrackerConfig {
        init_iterations: 0,
        ..config()
    };
    let t = Tracker::initialize(&frame, target(), cfg.clone(), net()).unwrap();
    assert_eq!(t.state().net, net());

    // independent replay of the initialization sampling
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.rng_seed);
    rng.set_stream(0);
    let dims = ImageDims::new(W, H);
    let pos = sample_positives(&target(), dims, &cfg.sampler, &mut rng).unwrap();
    let neg = sample_negatives(&target(), dims, &cfg.sampler, &mut rng).unwrap();
    let expected = AppearanceModel::fit(&features(&net(), &frame, &pos), &features(&net(), &frame, &neg), 1e-4).unwrap();
    assert_eq!(t.state().model, expected);
}

#[test]
fn fine_tuning_separates_positive_and_negative_scores() {
    let frame = scene(target(), 1);
    let cfg = config();
    let t = Tracker::initialize(&frame, target(), cfg.clone(), net()).unwrap();
    let report = t.init_report().unwrap();
    assert!(report.iterations >= 1 && report.iterations <= cfg.init_iterations);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dims = ImageDims::new(W, H);
    let pos = sample_positives(&target(), dims, &cfg.sampler, &mut rng).unwrap();
    let neg = sample_negatives(&target(), dims, &cfg.sampler, &mut rng).unwrap();
    let m = &t.state().model;
    let mean = |fs: Vec<FeatureVector>| fs.iter().map(|f| m.score(f).unwrap()).sum::<f64>() / fs.len() as f64;
    let (p, n) = (mean(features(&t.state().net, &frame, &pos)), mean(features(&t.state().net, &frame, &neg)));
    assert!(p > n, "positive mean {p} <= negative mean {n}");
}

#[test]
fn initialization_is_deterministic() {
    let frame = scene(target(), 1);
    let a = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    let b = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    assert_eq!(encoded(a.state()), encoded(b.state()));
}

#[test]
fn identical_frame_relocalizes() {
    let frame = scene(target(), 1);
    for seed in [3, 5, 6, 10] {
        // 40 short steps cannot diverge, and a tight clip would leave this small net untrained
        let mut cfg = TrackerConfig {
            max_grad_norm: None,
            ..config()
        };
        cfg.sampler.rng_seed = seed;
        let mut t = Tracker::initialize(&frame, target(), cfg, init_network(&net_config(), seed).unwrap()).unwrap();
        let r = t.track_frame(&frame).unwrap();
        assert!(iou(&r.bbox, &target()) >= 0.8, "seed {seed}: iou {}", iou(&r.bbox, &target()));
    }
}

#[test]
fn freezing_both_leaves_model_and_net_untouched() {
    let frame = scene(target(), 1);
    let cfg = TrackerConfig {
        freeze_net: true,
        freeze_gaussians: true,
        ..config()
    };
    let mut t = Tracker::initialize(&frame, target(), cfg, net()).unwrap();
    let (net0, model0) = (t.state().net.clone(), t.state().model.clone());
    for k in 1..4 {
        t.track_frame(&scene(moved(target(), 2.0 * k as f64, 1.0), 10 + k)).unwrap();
        assert_eq!(t.state().net, net0);
        assert_eq!(t.state().model, model0);
    }
}

#[test]
fn rejected_frame_changes_only_box_and_counter() {
    let frame = scene(target(), 1);
    let mut t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    // target hidden behind a flat panel
    let mut occluded = scene(target(), 2);
    for y in 30..70 {
        for x in 50..100 {
            occluded.set(x, y, 0, 128);
        }
    }
    let before = t.state().clone();
    let r = t.track_frame(&occluded).unwrap();
    assert!(r.score < 0.0, "occluded frame scored {}", r.score);
    assert!(!r.updated);
    let after = t.state();
    assert_eq!(after.net, before.net);
    assert_eq!(after.model, before.model);
    assert_eq!(after.last_update_feature, before.last_update_feature);
    assert_eq!(after.last_update_frame, before.last_update_frame);
    assert_eq!(after.frame_index, before.frame_index + 1);
}

#[test]
fn should_update_examples() {
    let frame = scene(target(), 1);
    let t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    let last = t.state().last_update_feature.clone();
    assert!(!t.should_update(-0.1, &last));
    assert!(t.should_update(1.0, &last));
    // orthogonal to `last` within the span of two of its coordinates
    let (j, k) = {
        let mut nz = last.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i);
        (nz.next().unwrap(), nz.next().unwrap_or(usize::MAX))
    };
    let mut v = vec![0.0; last.len()];
    if k == usize::MAX {
        v[(j + 1) % last.len()] = 1.0;
    } else {
        v[j] = last[k];
        v[k] = -last[j];
    }
    let ortho = FeatureVector::new(v);
    assert!(ortho.cosine(&last).abs() < 1e-12);
    assert!(!t.should_update(1.0, &ortho));
}

#[test]
fn returned_score_is_the_candidate_maximum() {
    let frame = scene(target(), 1);
    let cfg = TrackerConfig {
        keep_candidate_scores: true,
        ..config()
    };
    let mut t = Tracker::initialize(&frame, target(), cfg.clone(), net()).unwrap();
    for k in 1..4 {
        let r = t.track_frame(&scene(moved(target(), 3.0 * k as f64, -1.0), 20 + k)).unwrap();
        assert_eq!(r.candidates.len(), cfg.sampler.n_candidates);
        for (_, s) in &r.candidates {
            assert!(r.score >= *s);
        }
    }
}

#[test]
fn aspect_ratio_is_conserved() {
    let frame = scene(target(), 1);
    let mut t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    let aspect = target().aspect();
    let mut at = target();
    for k in 0..12 {
        at = moved(at, if k < 6 { 3.0 } else { -3.0 }, 1.0);
        let r = t.track_frame(&scene(at, 30 + k)).unwrap();
        assert!((r.bbox.aspect() - aspect).abs() <= 1e-9 * aspect);
        assert!((t.state().current_box.aspect() - aspect).abs() <= 1e-9 * aspect);
    }
}

#[test]
fn wrong_frame_size_is_rejected() {
    let frame = scene(target(), 1);
    let mut t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    let small = ImageBuffer::filled(W / 2, H, 1, 0).unwrap();
    assert!(matches!(t.track_frame(&small), Err(TrackerError::FrameSize { .. })));
}

#[test]
fn box_outside_frame_is_rejected() {
    let frame = scene(target(), 1);
    let outside = BoundingBox::new(150.0, 40.0, 30.0, 20.0).unwrap();
    assert!(matches!(
        Tracker::initialize(&frame, outside, config(), net()),
        Err(TrackerError::BoxOutsideFrame(_))
    ));
}

#[test]
fn state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frame = scene(target(), 1);
    let mut t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    t.track_frame(&scene(moved(target(), 2.0, 1.0), 2)).unwrap();
    let path = dir.path().join("state.gdtw");
    save_state(t.state(), &path).unwrap();
    let loaded = load_state::<f64>(&path).unwrap();
    assert_eq!(&loaded, t.state());

    // a resumed tracker continues exactly like the original
    let next = scene(moved(target(), 4.0, 2.0), 3);
    let mut resumed = Tracker::resume(config(), loaded).unwrap();
    assert_eq!(resumed.track_frame(&next).unwrap(), t.track_frame(&next).unwrap());
    assert_eq!(encoded(resumed.state()), encoded(t.state()));
}

#[test]
fn weights_file_is_not_a_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.gdtw");
    save_weights(&net(), &path).unwrap();
    assert!(matches!(load_state::<f64>(&path), Err(TrackerError::NotAState(_))));
}

#[test]
fn corrupted_gaussian_section_is_named() {
    let frame = scene(target(), 1);
    let t = Tracker::initialize(&frame, target(), config(), net()).unwrap();
    for section in ["gauss_pos", "gauss_neg"] {
        let tensors: Vec<Tensor> = state_tensors(t.state())
            .into_iter()
            .map(|mut x| {
                if x.name == format!("{section}/var") {
                    x.values[0] = -1.0;
                }
                x
            })
            .collect();
        let err = state_from_tensors::<f64>(TensorMap::new(tensors)).unwrap_err();
        assert!(err.to_string().contains(section), "{err}");

        let truncated: Vec<Tensor> = state_tensors(t.state())
            .into_iter()
            .map(|mut x| {
                if x.name == format!("{section}/mu") {
                    x.values.pop();
                    x.dims = vec![x.values.len() as u32];
                }
                x
            })
            .collect();
        let err = state_from_tensors::<f64>(TensorMap::new(truncated)).unwrap_err();
        assert!(err.to_string().contains(section), "{err}");
    }
}

#[test]
fn f32_tracker_runs() {
    let frame = scene(target(), 1);
    let net32: gdt_core::Network32 = init_network(&net_config(), 5).unwrap();
    let mut t = gdt_core::Tracker32::initialize(&frame, target(), config(), net32).unwrap();
    let r = t.track_frame(&scene(moved(target(), 2.0, 0.0), 2)).unwrap();
    assert!(r.score.is_finite());
}
