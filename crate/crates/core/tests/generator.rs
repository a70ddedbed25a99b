use pathvid::config::RunConfig;
use pathvid::generator::{Generator, GeneratorConfig, UpPoolingBlock, VideoClip};
use pathvid::latent::{LatentNoise, LATENT_DIM};
use pathvid::pathvid_nn::{Builder, NormMode, ParamKind, ParamStore, Session, Tensor};
use pathvid::text::TEXT_DIM;
use pathvid::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_gen() -> GeneratorConfig {
    GeneratorConfig {
        seed_channels: 8,
        block_count: 2,
        channel_schedule: vec![4, 4],
        hidden: 16,
        noise_dim: 4,
        ..GeneratorConfig::tiny()
    }
}

fn build(cfg: &GeneratorConfig, spectral: bool, seed: u64) -> (ParamStore, Generator) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(&mut Builder::new(&mut store, &mut rng, "gen").spectral(spectral), cfg).unwrap();
    (store, g)
}

#[test]
fn seed_is_a_channel_major_reshape_of_the_projection() {
    let cfg = micro_gen();
    let (store, g) = build(&cfg, false, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::randn(vec![3, LATENT_DIM + cfg.noise_dim], &mut rng);
    let mut s = Session::eval(&store);
    let zv = s.constant(z.clone());
    let seed = g.latent_to_spatial(&mut s, zv).unwrap();
    let got = s.value(seed);
    assert_eq!(got.shape(), &[3, 8, 4, 4]);
    let w = &store.get(g.seed_fc.weight).value;
    let cols = w.shape()[1];
    for n in 0..3 {
        for c in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    let col = c * 16 + i * 4 + j;
                    let expect: f32 = (0..z.shape()[1]).map(|k| z.row(n)[k] * w.data()[k * cols + col]).sum();
                    let idx = ((n * 8 + c) * 4 + i) * 4 + j;
                    assert!((got.data()[idx] - expect).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn block_doubles_resolution_and_reduces_to_the_skip_when_the_long_path_is_zero() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = UpPoolingBlock::new(&mut Builder::new(&mut store, &mut rng, "b"), 3, 2, 5, 0.2, true).unwrap();
    let x = Tensor::randn(vec![2, 3, 4, 4], &mut rng);
    let cond = Tensor::randn(vec![2, 5], &mut rng);
    for id in block.conv2.params() {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let mut s = Session::eval(&store).with_mode(NormMode::Batch);
    let (xv, cv) = (s.constant(x.clone()), s.constant(cond));
    let y = block.forward(&mut s, xv, cv).unwrap();
    let y = s.value(y).clone();
    assert_eq!(y.shape(), &[2, 2, 8, 8]);

    let w = &store.get(block.short.weight).value;
    let bias = &store.get(block.short.bias.unwrap()).value;
    for n in 0..2 {
        for o in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let mut v = bias.data()[o];
                    for c in 0..3 {
                        v += w.data()[o * 3 + c] * x.data()[((n * 3 + c) * 4 + i / 2) * 4 + j / 2];
                    }
                    let got = y.data()[((n * 2 + o) * 8 + i) * 8 + j];
                    assert!((got - v).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn tiny_preset_renders_32_pixel_videos_in_range() {
    let cfg = RunConfig::preset("tiny").unwrap();
    let model = Model::new(&cfg.model, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = model.embed(&["red circle moving left", "blue square jumping"]).unwrap();
    let noise = model.noise(2, 3, &mut rng);
    let v = model.generate(&raw, &noise, NormMode::Batch).unwrap();
    assert_eq!(v.shape(), &[2, 3, 3, 32, 32]);
    assert!(v.data().iter().all(|x| x.is_finite() && x.abs() <= 1.0));
    let again = model.generate(&raw, &noise, NormMode::Batch).unwrap();
    assert_eq!(v, again);
}

#[test]
fn output_size_follows_the_block_count() {
    let mut cfg = micro_gen();
    for blocks in 1..=3 {
        cfg.block_count = blocks;
        cfg.channel_schedule = vec![4; blocks];
        assert_eq!(cfg.output_hw(), (4 << blocks, 4 << blocks));
    }
    cfg.channel_schedule = vec![4];
    assert!(cfg.validate().is_err());
}

#[test]
fn every_generator_weight_receives_gradient() {
    let cfg = micro_gen();
    let (mut store, g) = build(&cfg, true, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = Tensor::randn(vec![3, TEXT_DIM], &mut rng);
    let noise = LatentNoise::sample(3, 4, cfg.noise_dim, false, &mut rng);
    let mut s = Session::train(&store, &["gen."]);
    let ev = s.constant(e);
    let pass = g.forward(&mut s, ev, &noise).unwrap();
    let w = s.constant(Tensor::randn(s.value(pass.video).shape().to_vec(), &mut rng));
    let prod = s.graph.mul(pass.video, w).unwrap();
    let loss = s.graph.sum(prod);
    let (graph, _) = s.finish();
    let grads = graph.backward(loss).unwrap();
    store.accumulate(&grads);
    for (_, p) in store.iter() {
        if p.kind == ParamKind::Weight {
            assert!(p.grad.max_abs() > 0.0, "{} has no gradient", p.name);
        }
    }
}

fn loss_of(store: &ParamStore, g: &Generator, e: &Tensor, noise: &LatentNoise, w: &Tensor) -> f64 {
    let mut s = Session::eval(store).with_mode(NormMode::Batch);
    let ev = s.constant(e.clone());
    let pass = g.forward(&mut s, ev, noise).unwrap();
    s.value(pass.video).data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = micro_gen();
    let (mut store, g) = build(&cfg, false, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = Tensor::randn(vec![2, TEXT_DIM], &mut rng);
    let noise = LatentNoise::sample(2, 3, cfg.noise_dim, false, &mut rng);
    let w = Tensor::randn(vec![2, 3, 3, 16, 16], &mut rng);

    let mut s = Session::train(&store, &["gen."]);
    let ev = s.constant(e.clone());
    let pass = g.forward(&mut s, ev, &noise).unwrap();
    let wv = s.constant(w.clone());
    let prod = s.graph.mul(pass.video, wv).unwrap();
    let loss = s.graph.sum(prod);
    let (graph, _) = s.finish();
    store.accumulate(&graph.backward(loss).unwrap());

    let probes = [
        g.latent.f1.weight,
        g.latent.f3.weight,
        g.latent.cbn.gamma_net.weight,
        g.seed_fc.weight,
        g.blocks[0].conv1.weight,
        g.blocks[1].short.weight,
        g.blocks[1].cbn2.beta_net.weight,
        g.rgb.weight,
    ];
    let h = 2e-3f32;
    let mut worst = 0.0f32;
    for id in probes {
        let n = store.get(id).value.len();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..6 {
            let i = rng.random_range(0..n);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = loss_of(&store, &g, &e, &noise, &w);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = loss_of(&store, &g, &e, &noise, &w);
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push(((plus - minus) / (2.0 * h as f64)) as f32);
            analytic.push(store.get(id).grad.data()[i]);
        }
        let scale = analytic.iter().chain(&numeric).fold(1e-6f32, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(&numeric).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        let rel = diff / scale;
        assert!(rel < 5e-2, "{}: analytic {analytic:?} numeric {numeric:?}", store.get(id).name);
        worst = worst.max(rel);
    }
    eprintln!("worst parameter gradient error {worst:.2e}");
}

#[test]
fn running_mode_is_equivariant_to_batch_permutation() {
    let cfg = micro_gen();
    let (store, g) = build(&cfg, true, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let e = Tensor::randn(vec![3, TEXT_DIM], &mut rng);
    let noise = LatentNoise::sample(3, 4, cfg.noise_dim, false, &mut rng);
    let run = |e: &Tensor, noise: &LatentNoise| {
        let mut s = Session::eval(&store).with_mode(NormMode::Running);
        let ev = s.constant(e.clone());
        let pass = g.forward(&mut s, ev, noise).unwrap();
        s.value(pass.video).clone()
    };
    let base = run(&e, &noise);
    let perm = [2, 0, 1];
    let permuted = run(&e.select_rows(&perm), &noise.select(&perm));
    let per = base.len() / 3;
    for (k, &p) in perm.iter().enumerate() {
        let a = &base.data()[p * per..(p + 1) * per];
        let b = &permuted.data()[k * per..(k + 1) * per];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn clips_round_trip_through_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = Tensor::randn(vec![2, 3, 4, 8, 8], &mut rng);
    let caps = vec!["a".to_string(), "b".to_string()];
    let clips = VideoClip::from_batch(&v, &caps).unwrap();
    assert_eq!(clips[1].frame_count(), 4);
    assert_eq!(clips[1].resolution(), (8, 8));
    let back = VideoClip::to_batch(&clips.iter().map(|c| &c.frames).collect::<Vec<_>>()).unwrap();
    assert_eq!(back, v);
    assert!(VideoClip::from_batch(&v, &caps[..1]).is_err());
}
