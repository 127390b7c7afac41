use super::*;
use crate::attack::TransformRanges;
use crate::testutil::{tiny_dataset, tiny_detector, TINY};
use ndarray::Array3;
use proptest::prelude::*;
use rand::Rng;

fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, |_, _, _| rng.gen())
}

fn random_frame(t: usize, hw: (usize, usize), seed: u64) -> WhiteFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = (hw.0 + 2 * t, hw.1 + 2 * t, 3);
    WhiteFrame::new(t, hw, Array3::from_shape_fn(dim, |_| rng.gen())).unwrap()
}

fn random_patch(side: usize, seed: u64) -> AdversarialPatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AdversarialPatch::new(Array3::from_shape_fn((side, side, 3), |_| rng.gen_range(0.1..0.9))).unwrap()
}

fn small_config() -> DefenseConfig {
    DefenseConfig {
        // scales to 4 px at the tiny input size
        thickness: 42,
        epochs: 1,
        patch_steps: 1,
        frame_steps: 1,
        subset_m: 3,
        max_sweeps: 2,
        seed: 9,
        attack: AttackConfig {
            patch_side: 8,
            patch_scale_factor: 0.5,
            seed: 9,
            ..AttackConfig::default()
        },
        ..DefenseConfig::default()
    }
}

#[test]
fn zero_thickness_is_identity() {
    let x = noise_image(12, 9, 1);
    let w = WhiteFrame::filled(0, (12, 9), 0.3);
    assert_eq!(apply_frame(&x, &w).unwrap(), x);
}

#[test]
fn white_ring_around_black_square() {
    let x = ImageTensor::filled(2, 2, 0.0);
    let w = WhiteFrame::filled(1, (2, 2), 1.0);
    let out = apply_frame(&x, &w).unwrap();
    assert_eq!(out.dims(), (4, 4));
    for y in 0..4 {
        for xx in 0..4 {
            let inner = (1..3).contains(&y) && (1..3).contains(&xx);
            assert_eq!(out.pixel(y, xx), if inner { [0.0; 3] } else { [1.0; 3] });
        }
    }
}

#[test]
fn frame_interior_holds_no_values() {
    let w = random_frame(3, (5, 7), 2);
    for ((y, x, _), v) in w.pattern.indexed_iter() {
        if !w.is_border(y, x) {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn mismatched_image_is_rejected() {
    let w = WhiteFrame::filled(2, (10, 10), 0.5);
    assert!(matches!(apply_frame(&noise_image(10, 11, 3), &w), Err(Error::Shape(_))));
}

#[test]
fn thickness_scales_with_resolution() {
    assert_eq!(scaled_thickness(80, 416), 80);
    assert_eq!(scaled_thickness(80, 104), 20);
    assert_eq!(scaled_thickness(60, 104), 15);
    assert_eq!(scaled_thickness(40, 104), 10);
}

#[test]
fn distance_of_identical_inputs_is_zero() {
    let d = tiny_detector(4);
    let x = noise_image(TINY, TINY, 5);
    for k in [1, 2] {
        assert_eq!(prediction_distance(&d, &x, &x, k, FieldWindow::FULL).unwrap(), 0.0);
    }
}

#[test]
fn distance_is_symmetric() {
    let d = tiny_detector(6);
    let a = noise_image(TINY, TINY, 7);
    let b = noise_image(TINY, TINY, 8);
    for k in [1, 2] {
        let ab = prediction_distance(&d, &a, &b, k, FieldWindow::FULL).unwrap();
        let ba = prediction_distance(&d, &b, &a, k, FieldWindow::FULL).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn unit_offset_over_thirteen_by_thirteen_gives_169() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f = Array3::from_shape_fn((13, 13, 1), |_| rng.gen::<f64>());
    let a = ObjectnessField::new(f.clone());
    let b = ObjectnessField::new(f + 1.0);
    assert!((field_distance(&b, &a, 1, FieldWindow::FULL).unwrap() - 169.0).abs() < 1e-9);
}

#[test]
fn two_norm_matches_flattened_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Array3::from_shape_fn((13, 13, 2), |_| rng.gen::<f64>());
    let b = Array3::from_shape_fn((13, 13, 2), |_| rng.gen::<f64>());
    let flat: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let oracle = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let got = field_distance(&ObjectnessField::new(a), &ObjectnessField::new(b), 2, FieldWindow::FULL).unwrap();
    assert!((got - oracle).abs() < 1e-6);
}

#[test]
fn window_resampling_of_a_constant_field_is_exact() {
    let a = ObjectnessField::new(Array3::from_elem((13, 13, 1), 0.3));
    let b = ObjectnessField::new(Array3::from_elem((13, 13, 1), 0.3));
    let win = WhiteFrame::filled(20, (104, 104), 0.5).window();
    assert!(field_distance(&a, &b, 2, win).unwrap() < 1e-12);
}

#[test]
fn bad_norm_is_rejected() {
    let a = ObjectnessField::new(Array3::zeros((3, 3, 1)));
    assert!(field_distance(&a, &a, 3, FieldWindow::FULL).is_err());
}

#[test]
fn swf_loss_without_patch_or_frame_is_zero() {
    let d = tiny_detector(12);
    let x = noise_image(TINY, TINY, 13);
    let w = WhiteFrame::filled(0, (TINY, TINY), 0.5);
    let l = loss_swf(&d, &x, &[], &random_patch(8, 1), &w, &TransformSample::identity(), 0.3, 2).unwrap();
    assert!(l < 1e-3);
}

#[test]
fn swf_loss_is_finite_and_non_negative() {
    let d = tiny_detector(14);
    let data = tiny_dataset(3, 15);
    for (i, s) in data.iter().enumerate() {
        let w = random_frame(4, (TINY, TINY), i as u64);
        let l = loss_swf(&d, &s.image, &s.boxes, &random_patch(8, 2), &w, &TransformSample::identity(), 0.5, 2).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
}

#[test]
fn swf_gradient_matches_finite_differences_on_frame_pixels() {
    let d = tiny_detector(16);
    let data = tiny_dataset(1, 17);
    let s = &data.samples[0];
    let p = random_patch(8, 18);
    let t = TransformSample::identity();
    let w = random_frame(4, (TINY, TINY), 19);
    for k in [1, 2] {
        let clean = d.objectness_field(&s.image).unwrap();
        let (_, g) = loss_swf_grad(&d, &s.image, &clean, &s.boxes, &p, &w, &t, 0.5, k).unwrap();
        let live: Vec<_> = g.indexed_iter().filter(|(_, v)| v.abs() > 1e-9).map(|(i, _)| i).collect();
        assert!(!live.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let h = 1e-6;
        for _ in 0..20 {
            let idx = live[rng.gen_range(0..live.len())];
            assert!(w.is_border(idx.0, idx.1));
            let mut a = w.clone();
            a.pattern[idx] += h;
            let mut b = w.clone();
            b.pattern[idx] -= h;
            let fa = loss_swf(&d, &s.image, &s.boxes, &p, &a, &t, 0.5, k).unwrap();
            let fb = loss_swf(&d, &s.image, &s.boxes, &p, &b, &t, 0.5, k).unwrap();
            let fd = (fa - fb) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs());
            assert!(rel < 1e-3, "k={k} {idx:?}: fd {fd} analytic {}", g[idx]);
        }
    }
}

#[test]
fn swf_runs_exactly_the_configured_steps() {
    let d = tiny_detector(21);
    let data = tiny_dataset(1, 22);
    let s = &data.samples[0];
    let run = optimize_swf(&d, &s.image, &s.boxes, &small_config()).unwrap();
    assert_eq!((run.patch_steps_run, run.frame_steps_run), (1, 1));
    let cfg = DefenseConfig {
        epochs: 2,
        patch_steps: 3,
        frame_steps: 2,
        ..small_config()
    };
    let run = optimize_swf(&d, &s.image, &s.boxes, &cfg).unwrap();
    assert_eq!((run.patch_steps_run, run.frame_steps_run), (6, 4));
    assert!(run.frame.pattern.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(run.frame.thickness, 4);
}

#[test]
fn swf_needs_a_person() {
    let d = tiny_detector(23);
    assert!(optimize_swf(&d, &noise_image(TINY, TINY, 1), &[], &small_config()).is_err());
}

#[test]
fn defense_error_on_one_image_is_its_swf_loss() {
    let d = tiny_detector(24);
    let data = tiny_dataset(1, 25);
    let cfg = small_config();
    let p = random_patch(8, 26);
    let w = random_frame(4, (TINY, TINY), 27);
    let s = &data.samples[0];
    let t = TransformSample::keyed(&s.image_id, derive_seed(cfg.seed, "defense-error"), &TransformRanges::default(), false);
    let single = loss_swf(&d, &s.image, &s.boxes, &p, &w, &t, cfg.attack.patch_scale_factor, cfg.norm_k).unwrap();
    let err = defense_error(&d, &data, &p, &w, &cfg).unwrap();
    assert!((err - single).abs() < 1e-12);
}

#[test]
fn defense_error_is_the_per_image_average() {
    let d = tiny_detector(28);
    let data = tiny_dataset(4, 29);
    let cfg = small_config();
    let p = random_patch(8, 30);
    let w = random_frame(4, (TINY, TINY), 31);
    let err = defense_error(&d, &data, &p, &w, &cfg).unwrap();
    let by_hand: f64 = data
        .iter()
        .map(|s| {
            let t = TransformSample::keyed(&s.image_id, derive_seed(cfg.seed, "defense-error"), &TransformRanges::default(), false);
            loss_swf(&d, &s.image, &s.boxes, &p, &w, &t, cfg.attack.patch_scale_factor, cfg.norm_k).unwrap()
        })
        .sum::<f64>()
        / 4.0;
    assert!((err - by_hand).abs() < 1e-9);

    let mut doubled = data.samples.clone();
    doubled.extend(data.samples.iter().cloned());
    // ids repeat on purpose so each copy sees the same keyed transform
    let doubled = LabeledDataset {
        samples: doubled,
        split: data.split,
    };
    assert!((defense_error(&d, &doubled, &p, &w, &cfg).unwrap() - err).abs() < 1e-12);
    let empty = LabeledDataset::new(Vec::new(), data.split).unwrap();
    assert!(defense_error(&d, &empty, &p, &w, &cfg).is_err());
}

#[test]
fn huge_delta_keeps_the_initial_frame() {
    let d = tiny_detector(32);
    let data = tiny_dataset(5, 33);
    let cfg = DefenseConfig {
        delta: 1e300,
        epochs: 2,
        ..small_config()
    };
    let run = optimize_uwf(&d, &data, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "uwf-init"));
    let init = WhiteFrame::gaussian(4, (TINY, TINY), cfg.init_mean, cfg.init_std, &mut rng);
    assert_eq!(run.frame.pattern, init.pattern);
    assert!(run.frame.universal);
    assert!(run.inner.iter().all(|r| r.sweeps == 0 && !r.hit_cap));
    assert_eq!(run.frame_steps_run, 0);
    assert_eq!(run.patch_steps_run, 2 * 3);
    assert_eq!(run.frame.err_trace.len(), 2);
}

#[test]
fn uwf_inner_loop_never_ends_worse_than_it_started() {
    let d = tiny_detector(34);
    let data = tiny_dataset(5, 35);
    let cfg = DefenseConfig {
        delta: 1e-9,
        epochs: 2,
        frame_steps: 2,
        ..small_config()
    };
    let run = optimize_uwf(&d, &data, &cfg).unwrap();
    for r in &run.inner {
        assert!(r.err_exit <= r.err_entry + 1e-6, "{r:?}");
        assert_eq!(r.sweeps, cfg.max_sweeps);
        assert!(r.hit_cap);
    }
    assert_eq!(run.subset_ids.len(), 3);
    assert_eq!(run.frame_steps_run, 2 * cfg.max_sweeps * 3 * 2);
    assert!(run.frame.pattern.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn uwf_is_deterministic() {
    let d = tiny_detector(36);
    let data = tiny_dataset(4, 37);
    let cfg = DefenseConfig {
        delta: 1e-9,
        max_sweeps: 1,
        ..small_config()
    };
    let a = optimize_uwf(&d, &data, &cfg).unwrap();
    let b = optimize_uwf(&d, &data, &cfg).unwrap();
    assert_eq!(a.frame.digest().unwrap(), b.frame.digest().unwrap());
    assert_eq!(a.patch.digest().unwrap(), b.patch.digest().unwrap());
    assert_eq!(a.frame.err_trace, b.frame.err_trace);
}

#[test]
fn uwf_rejects_mixed_sizes() {
    let d = tiny_detector(38);
    let mut data = tiny_dataset(2, 39);
    data.samples[1].image = noise_image(TINY + 2, TINY, 1);
    let cfg = DefenseConfig {
        subset_m: 2,
        ..small_config()
    };
    assert!(matches!(optimize_uwf(&d, &data, &cfg), Err(Error::Shape(_))));
}

#[test]
fn frame_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.png");
    let mut w = random_frame(3, (6, 5), 40);
    w.universal = true;
    w.err_trace = vec![1.5, 1.25];
    let rec = w.save(&path, 7, "abc", Some(60)).unwrap();
    assert_eq!(rec.get("thickness").unwrap(), "3");
    assert_eq!(rec.get("nominal_thickness").unwrap(), "60");
    let back = WhiteFrame::load(&path).unwrap();
    assert_eq!(back.thickness, 3);
    assert_eq!(back.canonical_hw, (6, 5));
    assert!(back.universal);
    assert_eq!(back.err_trace, w.err_trace);
    assert_eq!(back.digest().unwrap(), w.digest().unwrap());
}

#[test]
fn border_detections_are_dropped_when_unframing() {
    let w = WhiteFrame::filled(10, (20, 20), 0.5);
    let inside = BoundingBox::person(0.5, 0.5, 0.2, 0.2);
    let on_border = BoundingBox::person(0.1, 0.5, 0.1, 0.1);
    let out = unframe_boxes(&[inside, on_border], &w);
    assert_eq!(out.len(), 1);
    assert!((out[0].cx - 0.5).abs() < 1e-12);
    assert!((out[0].w - 0.4).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(DefenseConfig::default().validate().is_ok());
    assert!(DefenseConfig { epochs: 0, ..DefenseConfig::default() }.validate().is_err());
    assert!(DefenseConfig { delta: 0.0, ..DefenseConfig::default() }.validate().is_err());
    assert!(DefenseConfig { norm_k: 3, ..DefenseConfig::default() }.validate().is_err());
    assert_eq!(DefenseConfig::default().working_thickness((104, 104)), 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_preserves_interior_and_grows_by_twice_thickness(
        h in 1usize..12, w in 1usize..12, t in 0usize..6, seed in any::<u64>()
    ) {
        let x = noise_image(h, w, seed);
        let f = random_frame(t, (h, w), seed ^ 7);
        let out = apply_frame(&x, &f).unwrap();
        prop_assert_eq!(out.dims(), (h + 2 * t, w + 2 * t));
        let crop = out.crop(t, t, h, w).unwrap();
        prop_assert_eq!(&crop, &x);
        for ((y, xx, c), v) in out.as_array().indexed_iter() {
            if f.is_border(y, xx) {
                prop_assert_eq!(*v, f.pattern[[y, xx, c]]);
            }
        }
    }

    #[test]
    fn clamped_frames_stay_in_unit_range(seed in any::<u64>(), scale in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = WhiteFrame::filled(2, (4, 4), 0.5);
        f.pattern.mapv_inplace(|_| scale * rng.gen_range(-1.0..1.0));
        f.clamp();
        prop_assert!(f.pattern.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
