use avtx_core::conv_frontend::{conv_layer_cost, Vgg21d, Vgg21dConfig};
use avtx_core::tensorops::gradcheck;
use avtx_core::tensorops::{CostBuilder, Graph, ParamBuilder, ParamStore, Tensor};
use avtx_core::video::{TubeletWindow, VideoGeometry};
use avtx_core::vit_frontend::{PoolMode, Vit, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn vgg(cfg: &Vgg21dConfig, seed: u64) -> (Vgg21d, ParamStore) {
    let mut pb = ParamBuilder::new();
    let v = Vgg21d::new(&mut pb, "video", cfg).unwrap();
    (v, pb.initialize(seed))
}

fn vit(cfg: &VitConfig, seed: u64) -> (Vit, ParamStore) {
    let mut pb = ParamBuilder::new();
    let v = Vit::new(&mut pb, "video", cfg).unwrap();
    (v, pb.initialize(seed))
}

fn run_vgg(v: &Vgg21d, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::with_params(store, false);
    let xv = g.input(x.clone());
    let y = v.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

fn run_vit(v: &Vit, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::with_params(store, false);
    let xv = g.input(x.clone());
    let y = v.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

fn row(t: &Tensor, i: usize) -> &[avtx_core::Scalar] {
    let d = t.last_dim();
    &t.data()[i * d..(i + 1) * d]
}

fn tiny_vit() -> VitConfig {
    VitConfig {
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        pool: PoolMode::Token,
        geometry: VideoGeometry {
            frame: 8,
            patch: 4,
            depth: 2,
            window: TubeletWindow::Centered,
        },
    }
}

fn tiny_vgg() -> Vgg21dConfig {
    Vgg21dConfig {
        layer_channels: vec![2; 10],
        pool_after: vec![1, 2, 3, 5],
        output_dim: 3,
        frame: 16,
    }
}

#[test]
fn vgg_preserves_steps() {
    let cfg = Vgg21dConfig::desk();
    let (v, store) = vgg(&cfg, 1);
    for t in [1, 7, 33] {
        let y = run_vgg(&v, &store, &random(&[2, t, 32, 32, 3], t as u64));
        assert_eq!(y.shape(), &[2, t, cfg.output_dim]);
        assert!(y.is_finite());
    }
}

#[test]
fn vgg_full_size_channels_give_512_features() {
    let cfg = Vgg21dConfig { frame: 32, ..Vgg21dConfig::paper() };
    let (v, store) = vgg(&cfg, 2);
    let y = run_vgg(&v, &store, &random(&[1, 2, 32, 32, 3], 3));
    assert_eq!(y.shape(), &[1, 2, 512]);
    let foot = Vgg21dConfig { frame: 32, ..Vgg21dConfig::footnote() };
    let (v, store) = vgg(&foot, 2);
    assert_eq!(run_vgg(&v, &store, &random(&[1, 1, 32, 32, 3], 3)).shape(), &[1, 1, 512]);
}

#[test]
fn vgg_zero_weights_give_zero_features() {
    let (v, mut store) = vgg(&Vgg21dConfig::desk(), 3);
    for (_, e) in store.iter_mut() {
        e.value.data_mut().fill(0.0);
    }
    let y = run_vgg(&v, &store, &random(&[1, 4, 32, 32, 3], 4));
    assert!(y.data().iter().all(|&x| x == 0.0));
}

#[test]
fn vgg_constant_video_is_constant_away_from_the_edges() {
    let (v, store) = vgg(&Vgg21dConfig::desk(), 4);
    let frame = random(&[1, 1, 32, 32, 3], 5);
    let t = 13;
    let x = Tensor::from_fn(&[1, t, 32, 32, 3], |i| frame.data()[i % frame.len()]);
    let y = run_vgg(&v, &store, &x);
    // Five temporal convolutions with zero padding reach 5 steps from each end.
    for s in 6..t - 5 {
        assert_eq!(row(&y, s), row(&y, 5));
    }
}

#[test]
fn vgg_temporal_receptive_field_is_five_steps() {
    let (v, store) = vgg(&Vgg21dConfig::desk(), 5);
    let t = 16;
    let x = random(&[1, t, 32, 32, 3], 6);
    let base = run_vgg(&v, &store, &x);
    let mut y = x.clone();
    let f = 32 * 32 * 3;
    for e in &mut y.data_mut()[8 * f..9 * f] {
        *e += 0.5;
    }
    let moved = run_vgg(&v, &store, &y);
    for s in 0..t {
        let same = row(&base, s) == row(&moved, s);
        assert_eq!(same, s.abs_diff(8) > 5, "step {s}");
    }
}

#[test]
fn decomposed_kernels_cost_twelve_of_twenty_seven() {
    let mut b = CostBuilder::new();
    conv_layer_cost(&mut b.layer("full"), [3, 3, 3], 4, 16, 16, 64, 64);
    conv_layer_cost(&mut b.layer("spatial"), [1, 3, 3], 4, 16, 16, 64, 64);
    conv_layer_cost(&mut b.layer("temporal"), [3, 1, 1], 4, 16, 16, 64, 64);
    let r = b.finish();
    let full = r.layer("full").unwrap().mult_adds;
    let split = r.layer("spatial").unwrap().mult_adds + r.layer("temporal").unwrap().mult_adds;
    assert_eq!(split * 27, full * 12);
    assert_eq!(full, 4 * 16 * 16 * 64 * 27 * 64);
}

#[test]
fn vgg_gradients_match_finite_differences() {
    let (v, mut store) = vgg(&tiny_vgg(), 6);
    // Zero biases put pre-activations exactly on the ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for (name, e) in store.iter_mut() {
        if name.ends_with(".bias") {
            e.value.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.1..0.5));
        }
    }
    let store = store;
    let x = random(&[1, 3, 16, 16, 3], 7);
    let w = random(&[1, 3, 3], 8);
    let r = gradcheck::check_params(&store, &[x], 1e-6, |g, xs| {
        let y = v.forward(g, xs[0])?;
        let wv = g.input(w.clone());
        let p = g.mul(y, wv)?;
        g.sum(p)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn vgg_instrumented_cost_matches_analytic() {
    for cfg in [Vgg21dConfig::desk(), tiny_vgg(), Vgg21dConfig::paper()] {
        let (v, store) = vgg(&cfg, 9);
        let (b, t) = if cfg.frame == 128 { (1, 1) } else { (2, 3) };
        let mut g = Graph::with_params(&store, false);
        let x = g.input(random(&[b, t, cfg.frame, cfg.frame, 3], 10));
        v.forward(&mut g, x).unwrap();
        assert_eq!(g.cost_report(), v.cost(b, t));
    }
}

#[test]
fn vit_preserves_steps() {
    let cfg = VitConfig::desk();
    let (v, store) = vit(&cfg, 11);
    let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
    for t in [1, 7, 33] {
        let y = run_vit(&v, &store, &random(&[2, t, n, dim], t as u64));
        assert_eq!(y.shape(), &[2, t, cfg.d_model]);
        let y = run_vit(&v, &store, &random(&[t, n, dim], t as u64));
        assert_eq!(y.shape(), &[t, cfg.d_model]);
    }
}

#[test]
fn vit_steps_only_see_their_own_tubelets() {
    let cfg = VitConfig::desk();
    let (v, store) = vit(&cfg, 12);
    let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
    let x = random(&[9, n, dim], 13);
    let base = run_vit(&v, &store, &x);
    let mut y = x.clone();
    for e in &mut y.data_mut()[8 * n * dim..] {
        *e = -*e;
    }
    let moved = run_vit(&v, &store, &y);
    for s in 0..8 {
        assert_eq!(row(&base, s), row(&moved, s));
    }
    assert_ne!(row(&base, 8), row(&moved, 8));
}

#[test]
fn vit_commutes_with_time_permutation() {
    let cfg = VitConfig::desk();
    let (v, store) = vit(&cfg, 14);
    let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
    let t = 6;
    let x = random(&[t, n, dim], 15);
    let perm = [3, 0, 5, 1, 4, 2];
    let step = n * dim;
    let mut px = Vec::with_capacity(x.len());
    for &p in &perm {
        px.extend_from_slice(&x.data()[p * step..(p + 1) * step]);
    }
    let base = run_vit(&v, &store, &x);
    let permuted = run_vit(&v, &store, &Tensor::new(&[t, n, dim], px).unwrap());
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in row(&permuted, i).iter().zip(row(&base, p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn vit_is_sensitive_to_token_order() {
    let cfg = VitConfig::desk();
    let (v, store) = vit(&cfg, 16);
    let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
    let x = random(&[1, n, dim], 17);
    let mut swapped = x.clone();
    let d = swapped.data_mut();
    for j in 0..dim {
        d.swap(j, 5 * dim + j);
    }
    let a = run_vit(&v, &store, &x);
    let b = run_vit(&v, &store, &swapped);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn vit_first_tubelet_pooling_drops_the_pool_token() {
    let cfg = VitConfig {
        pool: PoolMode::FirstTubelet,
        ..VitConfig::desk()
    };
    let (v, store) = vit(&cfg, 18);
    assert!(v.pool_token.is_none());
    assert!(store.get("video.pos.pool_token").is_none());
    let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
    let y = run_vit(&v, &store, &random(&[3, n, dim], 19));
    assert_eq!(y.shape(), &[3, cfg.d_model]);
}

#[test]
fn vit_rejects_wrong_token_shapes() {
    let cfg = VitConfig::desk();
    let (v, store) = vit(&cfg, 20);
    let mut g = Graph::with_params(&store, false);
    let x = g.input(random(&[2, 15, cfg.geometry.token_dim()], 21));
    assert!(v.forward(&mut g, x).is_err());
}

#[test]
fn vit_gradients_match_finite_differences() {
    let cfg = tiny_vit();
    let (v, store) = vit(&cfg, 22);
    let x = random(&[2, cfg.geometry.tokens(), cfg.geometry.token_dim()], 23);
    let w = random(&[2, cfg.d_model], 24);
    let r = gradcheck::check_params(&store, &[x], 1e-5, |g, xs| {
        let y = v.forward(g, xs[0])?;
        let wv = g.input(w.clone());
        let p = g.mul(y, wv)?;
        g.sum(p)
    })
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn vit_instrumented_cost_matches_analytic() {
    for cfg in [VitConfig::desk(), tiny_vit(), VitConfig::paper()] {
        let (v, store) = vit(&cfg, 25);
        let (n, dim) = (cfg.geometry.tokens(), cfg.geometry.token_dim());
        let mut g = Graph::with_params(&store, false);
        let x = g.input(random(&[1, 2, n, dim], 26));
        v.forward(&mut g, x).unwrap();
        assert_eq!(g.cost_report(), v.cost(1, 2));
    }
}
