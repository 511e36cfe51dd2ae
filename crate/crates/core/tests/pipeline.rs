use avtx_core::audio::{
    features, mix_components, overlap_utterance, snr_db, stack3, unstack3, MelConfig, Waveform, FEATURE_DIM, MEL_BANDS,
    SAMPLE_RATE,
};
use avtx_core::audio::samples_for_steps;
use avtx_core::video::{
    assemble_frame, extract_tubelets, normalize_pixel, normalize_rgb, resample_indices, Rate, RawVideo, TubeletWindow,
    VideoClip, VideoGeometry,
};
use avtx_core::{Scalar, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), SAMPLE_RATE).unwrap()
}

fn clip(steps: usize, frame: usize, seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(&[steps, frame, frame, 3], |_| rng.gen_range(-1.0..1.0));
    VideoClip::new(t, Rate::ACOUSTIC).unwrap()
}

/// Nearest input frame by exact rational distance, ties to the earlier.
fn nearest(j: u64, n: usize, from: Rate, to: Rate) -> usize {
    // |i / from - j / to| scaled by from.num * to.num.
    let dist = |i: u64| (i * from.den * to.num).abs_diff(j * to.den * from.num);
    (0..n as u64).min_by_key(|&i| (dist(i), i)).unwrap() as usize
}

fn rate() -> impl Strategy<Value = Rate> {
    (1u64..120, 1u64..5).prop_map(|(n, d)| Rate::new(n, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tubelets_tile_every_frame_exactly(
        patch in 1usize..4,
        grid in 1usize..4,
        depth in 1usize..5,
        causal in any::<bool>(),
        steps in 1usize..6,
        seed in any::<u64>(),
    ) {
        let geom = VideoGeometry {
            frame: patch * grid,
            patch,
            depth,
            window: if causal { TubeletWindow::Causal } else { TubeletWindow::Centered },
        };
        let v = clip(steps, geom.frame, seed);
        let tb = extract_tubelets(&v, &geom).unwrap();
        prop_assert_eq!(tb.tokens.shape(), &[steps, grid * grid, patch * patch * depth * 3][..]);
        let fsize = geom.frame * geom.frame * 3;
        for t in 0..steps {
            for k in 0..depth {
                let src = geom.source_frame(t, k, steps);
                let want = &v.frames.data()[src * fsize..(src + 1) * fsize];
                let got = assemble_frame(&tb, &geom, t, k).unwrap();
                prop_assert_eq!(got.data(), want);
            }
            // The step's own frame sits at the anchor offset, away from the edges.
            if t >= geom.anchor() && t + depth - geom.anchor() <= steps {
                prop_assert_eq!(geom.source_frame(t, geom.anchor(), steps), t);
            }
        }
    }

    #[test]
    fn resampling_picks_the_nearest_frame(n in 1usize..60, from in rate(), to in rate()) {
        let idx = resample_indices(n, from, to).unwrap();
        let span = ((n as u128 - 1) * (to.num * from.den) as u128 / (to.den * from.num) as u128) as usize;
        prop_assert_eq!(idx.len(), span + 1);
        for (j, &i) in idx.iter().enumerate() {
            prop_assert_eq!(i, nearest(j as u64, n, from, to));
        }
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn equal_rates_resample_to_the_same_frames(n in 1usize..40, r in rate()) {
        let bytes: Vec<u8> = (0..n * 2 * 2 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let raw = RawVideo::new(2, 2, r, bytes).unwrap();
        prop_assert_eq!(raw.resample_nn(r).unwrap(), raw);
    }

    #[test]
    fn normalized_pixels_are_affine_in_bytes(a in any::<u8>(), b in any::<u8>()) {
        let (x, y) = (normalize_pixel(a), normalize_pixel(b));
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert!(((x - y) - (a as Scalar - b as Scalar) / 127.5).abs() < 1e-12);
    }

    #[test]
    fn stacking_round_trips(rows in 3usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, MEL_BANDS], |_| rng.gen_range(-5.0..5.0));
        let s = stack3(&x).unwrap();
        prop_assert_eq!(s.steps(), rows / 3);
        prop_assert_eq!(s.data.last_dim(), FEATURE_DIM);
        let back = unstack3(&s);
        prop_assert_eq!(back.data(), &x.data()[..rows / 3 * 3 * MEL_BANDS]);
    }

    #[test]
    fn mixing_hits_the_requested_snr(
        len in 200usize..2000,
        noise_len in 50usize..3000,
        target in -10.0f64..30.0,
        seed in any::<u64>(),
    ) {
        let clean = noise(len, seed);
        let n = noise(noise_len, seed ^ 1);
        let m = mix_components(&clean, &n, target as Scalar).unwrap();
        prop_assert_eq!(m.mixed.len(), len);
        prop_assert!((snr_db(&clean, &m.noise) - target as Scalar).abs() < 1e-9);
        for i in 0..len {
            prop_assert!((m.mixed.samples()[i] - clean.samples()[i] - m.noise.samples()[i]).abs() < 1e-12);
        }
        // Tiling keeps the noise periodic in its own length.
        if noise_len < len {
            prop_assert!((m.noise.samples()[noise_len] - m.noise.samples()[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn acoustic_rate_conversion_counts() {
    // 25 fps over 2 s: 51 frames cover 2 s, which is 66 steps of 30 ms plus the first.
    let idx = resample_indices(51, Rate::fps(25), Rate::ACOUSTIC).unwrap();
    assert_eq!(idx.len(), 67);
    // Step 2 at 60 ms is equidistant from frames 1 and 2.
    assert_eq!(idx[..4], [0, 1, 1, 2]);
    // Step 66 at 1.98 s ties between frames 49 and 50.
    assert_eq!(*idx.last().unwrap(), 49);
}

#[test]
fn normalize_rgb_shapes_and_values() {
    let raw = RawVideo::new(2, 1, Rate::fps(25), vec![0, 255, 128, 1, 2, 3, 9, 9, 9, 8, 8, 8]).unwrap();
    let v = normalize_rgb(&raw).unwrap();
    assert_eq!(v.frames.shape(), &[2, 1, 2, 3]);
    assert_eq!(v.frames.data()[0], -1.0);
    assert_eq!(v.frames.data()[1], 1.0);
    assert!((v.frames.data()[2] - 0.5 / 127.5).abs() < 1e-12);
    assert!(RawVideo::new(2, 1, Rate::fps(25), vec![0; 5]).is_err());
}

#[test]
fn waveform_to_features_has_requested_steps() {
    for steps in [1, 13, 50] {
        let w = noise(samples_for_steps(steps), steps as u64);
        let f = features(&w, &MelConfig::default()).unwrap();
        assert_eq!(f.data.shape(), &[steps, FEATURE_DIM]);
        assert!(f.data.is_finite());
        let short = noise(samples_for_steps(steps) - 1, 0);
        if steps > 1 {
            assert_eq!(features(&short, &MelConfig::default()).unwrap().steps(), steps - 1);
        }
    }
}

#[test]
fn overlap_adds_at_the_chosen_end() {
    let base = noise(8000, 1);
    let d = noise(1000, 2);
    let start = overlap_utterance(&base, &d, true).unwrap();
    let end = overlap_utterance(&base, &d, false).unwrap();
    assert_eq!(start.samples()[1000..], base.samples()[1000..]);
    assert_eq!(end.samples()[..7000], base.samples()[..7000]);
    assert_eq!(start.samples()[0], base.samples()[0] + d.samples()[0]);
    assert_eq!(end.samples()[7999], base.samples()[7999] + d.samples()[999]);
    assert!(overlap_utterance(&base, &noise(80_000, 3), true).is_err());
}
