//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p pathvid --test acceptance -- [criterion numbers]` runs a
//! subset; without arguments every criterion runs.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pathvid::config::RunConfig;
use pathvid::data::{sample_batch, Dataset};
use pathvid::discriminator::{enrich, ConditionalHead, ScoreTriple};
use pathvid::experiment::{real_features, run, toy_config, ExperimentOutcome};
use pathvid::latent::interpolate;
use pathvid::metrics::{build_query, frechet_distance, inception_score, Evaluator, GaussianStats, POOL_SIZE};
use pathvid::model::Model;
use pathvid::pathvid_nn::{suite, Builder, Graph, NormMode, ParamKind, ParamStore, Session, Tensor, BN_EPS};
use pathvid::text::TEXT_DIM;
use pathvid::training::{discriminator_loss, generator_loss, run_training};
use pathvid::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Check);

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-6;
const SPECTRAL_ITERS: usize = 20;
const SPECTRAL_BAND: (f64, f64) = (0.95, 1.05);
/// Reported only: cold-start power iteration on random Gaussian matrices
/// occasionally stays short of the band.
const SPECTRAL_WIDE_SWEEP: usize = 1000;
const FID_SELF_TOL: f64 = 1e-3;
const FID_CLOSED_TOL: f64 = 1e-3;
const FID_BRUTE_TOL: f64 = 1e-4;
const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_REQUIRED: usize = 2;
const FRAME_BATCHES: usize = 1000;
/// Upper 0.001 quantile of χ² with 4 degrees of freedom.
const CHI2_CRITICAL_4DOF: f64 = 18.467;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let cases = suite::cases();
    let mut worst = (0.0f32, "");
    for case in &cases {
        let e = case.worst_error(GRAD_SEEDS).map_err(|e| format!("{}: {e}", case.name))?;
        ensure(e < suite::TOLERANCE, || format!("{} relative error {e:.2e}", case.name))?;
        if e > worst.0 {
            worst = (e, case.name);
        }
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:.1?}"))?;
    Ok(format!(
        "{} primitives × {GRAD_SEEDS} seeds, worst {:.2e} ({}), {took:.1?}",
        cases.len(),
        worst.0,
        worst.1
    ))
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= ORACLE_TOL, || format!("{what}: {a} vs {b}"))
}

fn triple(g: &mut Graph, d3d: &[f32], d2d: &[f32], dr: &[f32]) -> ScoreTriple {
    let mut c = |v: &[f32]| g.constant(Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    ScoreTriple { d3d: c(d3d), d2d: c(d2d), dr: c(dr) }
}

fn hinge_d(real: &[[f32; 3]], fake: &[[f32; 3]]) -> f64 {
    let per: f64 = real
        .iter()
        .zip(fake)
        .map(|(r, f)| (0..3).map(|h| (1.0 - r[h] as f64).max(0.0) + (1.0 + f[h] as f64).max(0.0)).sum::<f64>())
        .sum();
    per / real.len() as f64
}

fn equation_oracles() -> Check {
    // latent path
    let path = interpolate(&[0.0], &[4.0], 4, false).map_err(|e| e.to_string())?;
    for (i, &v) in path.data().iter().enumerate() {
        close(v as f64, (i + 1) as f64, "path value")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (za, zb) = (Tensor::randn(vec![9], &mut rng), Tensor::randn(vec![9], &mut rng));
    let path = interpolate(za.data(), zb.data(), 6, false).map_err(|e| e.to_string())?;
    for i in 0..6 {
        for j in 0..9 {
            let (a, b) = (za.data()[j] as f64, zb.data()[j] as f64);
            let expect = (5 - i) as f64 / 6.0 * a + (i + 1) as f64 / 6.0 * b;
            close(path.row(i)[j] as f64, expect, "random path")?;
        }
    }

    // conditional normalization with one condition for the whole batch
    let mut store = ParamStore::new();
    let cbn = pathvid::pathvid_nn::Builder::new(&mut store, &mut rng, "cbn")
        .cond_batch_norm("n", 3, 5)
        .map_err(|e| e.to_string())?;
    let (n, c, hw) = (4, 3, 6);
    let x = Tensor::randn(vec![n, c, 2, 3], &mut rng).map(|v| 2.0 * v + 0.5);
    let cond_row = Tensor::randn(vec![5], &mut rng);
    let cond = Tensor::new(vec![n, 5], cond_row.data().repeat(n)).unwrap();
    let mut s = Session::eval(&store);
    let (xv, cv) = (s.constant(x.clone()), s.constant(cond));
    let y = cbn.forward(&mut s, xv, cv).map_err(|e| e.to_string())?;
    let y = s.value(y).clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..hw).map(move |p| (b * c + ch) * hw + p))
            .map(|i| x.data()[i] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for p in 0..hw {
                let i = (b * c + ch) * hw + p;
                let expect = (x.data()[i] as f64 - mean) / (var + BN_EPS as f64).sqrt();
                close(y.data()[i] as f64, expect, "conditional normalization")?;
            }
        }
    }

    // conditional score head
    let mut store = ParamStore::new();
    let head = ConditionalHead::new(&mut Builder::new(&mut store, &mut rng, "h"), 2).map_err(|e| e.to_string())?;
    store.get_mut(head.w_e.weight).value.data_mut().fill(0.0);
    store.get_mut(head.w_d.weight).value.data_mut().fill(1.0);
    let score = |store: &ParamStore, v: &Tensor, e: &Tensor| {
        let mut s = Session::eval(store);
        let (vv, ev) = (s.constant(v.clone()), s.constant(e.clone()));
        let out = head.score(&mut s, vv, ev).unwrap();
        s.value(out).data().to_vec()
    };
    let e = Tensor::randn(vec![1, TEXT_DIM], &mut rng);
    close(score(&store, &Tensor::ones(vec![1, 2]), &e)[0] as f64, 1.0, "score hand case")?;
    for id in [head.w_e.weight, head.w_d.weight] {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::randn(shape, &mut rng).map(|v| 0.3 * v);
    }
    let (v, e) = (Tensor::randn(vec![3, 2], &mut rng), Tensor::randn(vec![3, TEXT_DIM], &mut rng));
    let got = score(&store, &v, &e);
    let (we, wd) = (store.get(head.w_e.weight).value.clone(), store.get(head.w_d.weight).value.clone());
    for (b, &out) in got.iter().enumerate() {
        let mut total = 0.0f64;
        for k in 0..2 {
            let pre: f64 = (0..TEXT_DIM).map(|j| e.row(b)[j] as f64 * we.data()[j * 2 + k] as f64).sum();
            total += wd.data()[k] as f64 * v.row(b)[k] as f64 / (1.0 + (-pre).exp());
        }
        close(out as f64, total, "score")?;
    }

    // hinge objectives
    let mut g = Graph::no_grad();
    let fake = triple(&mut g, &[0.1, 0.3], &[0.0, 0.1], &[0.1, -0.2]);
    let l = generator_loss(&mut g, &fake).map_err(|e| e.to_string())?;
    close(g.value(l).item() as f64, -0.2, "generator loss")?;
    let real: Vec<[f32; 3]> = (0..5).map(|_| [0; 3].map(|_| rng.random_range(-2.0..2.0))).collect();
    let fakes: Vec<[f32; 3]> = (0..5).map(|_| [0; 3].map(|_| rng.random_range(-2.0..2.0))).collect();
    let col = |v: &[[f32; 3]], h: usize| v.iter().map(|r| r[h]).collect::<Vec<_>>();
    let rt = triple(&mut g, &col(&real, 0), &col(&real, 1), &col(&real, 2));
    let ft = triple(&mut g, &col(&fakes, 0), &col(&fakes, 1), &col(&fakes, 2));
    let l = discriminator_loss(&mut g, &rt, &ft).map_err(|e| e.to_string())?;
    close(g.value(l).item() as f64, hinge_d(&real, &fakes), "discriminator loss")?;
    let l = generator_loss(&mut g, &ft).map_err(|e| e.to_string())?;
    let expect = -fakes.iter().map(|f| f.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / 5.0;
    close(g.value(l).item() as f64, expect, "generator loss")?;
    Ok(format!("path, normalization, score and hinge losses within {ORACLE_TOL:e}"))
}

fn top_singular_value(t: &Tensor) -> f64 {
    let rows = t.shape()[0];
    let cols = t.len() / rows;
    DMatrix::from_row_iterator(rows, cols, t.data().iter().map(|&x| x as f64)).singular_values().max()
}

fn spectral_norm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut shapes = vec![(64, 64), (1, 64), (64, 1), (16, 36), (32, 27)];
    for _ in 0..35 {
        shapes.push((rng.random_range(1..=64), rng.random_range(1..=64)));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &(r, c)) in shapes.iter().enumerate() {
        let scale = 10f32.powf(rng.random_range(-2.0..2.0));
        let w = Tensor::randn(vec![r, c], &mut rng).map(|v| v * scale);
        let mut store = ParamStore::new();
        let id = store.add("w", w, ParamKind::Weight).map_err(|e| e.to_string())?;
        store.attach_spectral(id, &mut rng);
        let n = store.spectral_normalize(id, SPECTRAL_ITERS).map_err(|e| e.to_string())?;
        let s = top_singular_value(&n);
        ensure((SPECTRAL_BAND.0..=SPECTRAL_BAND.1).contains(&s), || format!("matrix {k} ({r}×{c}): σ = {s:.4}"))?;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let mut outside = 0;
    for _ in 0..SPECTRAL_WIDE_SWEEP {
        let (r, c) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let w = Tensor::randn(vec![r, c], &mut rng);
        let mut store = ParamStore::new();
        let id = store.add("w", w, ParamKind::Weight).map_err(|e| e.to_string())?;
        store.attach_spectral(id, &mut rng);
        let n = store.spectral_normalize(id, SPECTRAL_ITERS).map_err(|e| e.to_string())?;
        outside += usize::from(!(SPECTRAL_BAND.0..=SPECTRAL_BAND.1).contains(&top_singular_value(&n)));
    }
    Ok(format!(
        "{} matrices up to 64×64, σ ∈ [{lo:.4}, {hi:.4}]; wider sweep {outside} of {SPECTRAL_WIDE_SWEEP} outside the band",
        shapes.len()
    ))
}

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<GaussianStats, String> {
    GaussianStats::new(DVector::from_vec(mean), cov, 10).map_err(|e| e.to_string())
}

fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64, String> {
    frechet_distance(a, b).map_err(|e| e.to_string())
}

/// Trace of `(Σ₁Σ₂)^½` by Denman–Beavers iteration on the product itself.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut y = a * b;
    let mut z = DMatrix::identity(y.nrows(), y.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        let ny = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        y = ny;
    }
    y.trace()
}

fn metric_identities() -> Check {
    let k = 5;
    let n = 60;
    let uniform = Tensor::full(vec![n, k], 1.0 / k as f32);
    let (is, _) = inception_score(&uniform, 1).map_err(|e| e.to_string())?;
    ensure((is - 1.0).abs() < 1e-6, || format!("uniform IS {is}"))?;
    let one_hot = Tensor::from_fn(vec![n, k], |i| if i % k == (i / k) % k { 1.0 } else { 0.0 });
    let (is, _) = inception_score(&one_hot, 1).map_err(|e| e.to_string())?;
    ensure((is - k as f64).abs() < 1e-6, || format!("one-hot IS {is}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let spd = |d: usize, rng: &mut ChaCha8Rng| {
        let a = Tensor::randn(vec![d, d], rng);
        let a = DMatrix::from_fn(d, d, |i, j| a.data()[i * d + j] as f64);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    };
    let mut worst_brute = 0.0f64;
    for d in [1, 2, 3, 4, 8, 12, 16] {
        let (ca, cb) = (spd(d, &mut rng), spd(d, &mut rng));
        let (ma, mb): (Vec<f64>, Vec<f64>) = (0..d).map(|_| (rng.random::<f64>(), rng.random::<f64>())).unzip();
        let a = stats(ma.clone(), ca.clone())?;
        let b = stats(mb.clone(), cb.clone())?;
        let self_fid = fid(&a, &a)?;
        ensure(self_fid.abs() <= FID_SELF_TOL, || format!("FID(a, a) = {self_fid:e} at d = {d}"))?;
        let diff = DVector::from_vec(ma) - DVector::from_vec(mb);
        let brute = diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
        let got = fid(&a, &b)?;
        let err = (got - brute).abs() / brute.abs().max(1.0);
        ensure(err <= FID_BRUTE_TOL, || format!("d = {d}: {got} vs brute force {brute}"))?;
        worst_brute = worst_brute.max(err);
    }

    let shift = fid(&stats(vec![0.0, 0.0], DMatrix::identity(2, 2))?, &stats(vec![1.0, 0.0], DMatrix::identity(2, 2))?)?;
    ensure((shift - 1.0).abs() <= FID_CLOSED_TOL, || format!("unit shift {shift}"))?;
    let scaled = fid(&stats(vec![0.0; 2], DMatrix::identity(2, 2))?, &stats(vec![0.0; 2], DMatrix::identity(2, 2) * 4.0)?)?;
    ensure((scaled - 2.0).abs() <= FID_CLOSED_TOL, || format!("I vs 4I {scaled}"))?;
    Ok(format!("IS 1 and {k}, closed forms exact, brute force worst relative error {worst_brute:.1e}"))
}

fn structural_invariants() -> Check {
    let cfg = RunConfig::preset("toy").map_err(|e| e.to_string())?;
    let model = Model::new(&cfg.model, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (b, t) = (2, 5);
    let raw = model.embed(&["red circle moving left", "green square jumping"]).map_err(|e| e.to_string())?;
    let noise = model.noise(b, t, &mut rng);
    let videos = model.generate(&raw, &noise, NormMode::Batch).map_err(|e| e.to_string())?;
    ensure(videos.shape() == [b, 3, t, 32, 32], || format!("generator output {:?}", videos.shape()))?;
    ensure(videos.data().iter().all(|v| (-1.0..=1.0).contains(v)), || "generator output outside [−1, 1]".into())?;

    let store = ParamStore::new();
    let mut s = Session::eval(&store);
    let x = s.constant(videos.clone());
    let enriched = enrich(&mut s, x).map_err(|e| e.to_string())?;
    let y = s.value(enriched);
    let plane = 32 * 32;
    let at = |bb: usize, c: usize, f: usize| &y.data()[((bb * 7 + c) * t + f) * plane..][..plane];
    for c in 3..6 {
        for bb in 0..b {
            for f in 0..t {
                ensure(at(bb, c, f) == at(0, c, 0), || format!("average channel {c} differs at video {bb}, frame {f}"))?;
            }
        }
    }

    let dr = |sentences: &[&str]| -> Result<Vec<f32>, String> {
        let raw = model.embed(sentences).map_err(|e| e.to_string())?;
        Ok(model.score(&videos, &raw).map_err(|e| e.to_string())?.dr)
    };
    let a = dr(&["red circle moving left", "green square jumping"])?;
    let c = dr(&["blue triangle moving up", "yellow circle shrinking"])?;
    ensure(a == c, || "region scores depend on the sentence".into())?;

    let layers = model.disc.layers(&model.store);
    ensure(
        !layers.iter().any(|l| matches!(l.kind, pathvid::pathvid_nn::LayerKind::BatchNorm | pathvid::pathvid_nn::LayerKind::CondBatchNorm)),
        || "discriminator holds a normalization layer".into(),
    )?;
    ensure(!model.store.iter().any(|(_, p)| p.name.starts_with("disc.") && p.name.contains("bn")), || {
        "discriminator holds normalization parameters".into()
    })?;

    let cfg = common::micro_config();
    let ds = common::micro_dataset(&cfg);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut full = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    let end = run_training(&mut full, &ds, &dir.path().join("full"), None, |_| {}).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::load(&dir.path().join("full/checkpoints/step_0000005")).map_err(|e| e.to_string())?;
    let again = run_training(&mut resumed, &ds, &dir.path().join("half"), None, |_| {}).map_err(|e| e.to_string())?;
    ensure(common::dir_bytes(&end) == common::dir_bytes(&again), || "5+5 steps differ from 10 steps".into())?;
    Ok("toy output [2, 3, 5, 32, 32] in range, enrichment, region head, no normalization, replay bit-exact".into())
}

fn end_to_end() -> Check {
    let data_cfg = toy_config(0);
    let ds = Dataset::generate(&data_cfg.data, data_cfg.seed).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let evaluator = Evaluator::load_or_train(&dir.path().join("evaluator"), &ds, &data_cfg).map_err(|e| e.to_string())?;
    evaluator.reliable().map_err(|e| e.to_string())?;
    let real = real_features(&evaluator, &ds, &data_cfg).map_err(|e| e.to_string())?;
    let mut outcomes: Vec<ExperimentOutcome> = Vec::new();
    for &seed in &E2E_SEEDS {
        let passes = outcomes.iter().filter(|o| o.passed()).count();
        let left = E2E_SEEDS.len() - outcomes.len();
        if passes >= E2E_REQUIRED || passes + left < E2E_REQUIRED {
            break;
        }
        let (o, _) = run(&toy_config(seed), &ds, &evaluator, &real, |_| {}).map_err(|e| e.to_string())?;
        println!(
            "    seed {seed}: FID {:.4} → {:.4} ({:+.1}%), accuracy {:.3}, R-precision {:.3} vs baseline {:.3} ± {:.3}, {:.0} s  {}",
            o.fid_before,
            o.fid_after,
            -100.0 * o.fid_improvement(),
            o.accuracy,
            o.r_precision,
            o.baseline_mean,
            o.baseline_std,
            o.train_seconds,
            if o.passed() { "pass" } else { "fail" }
        );
        outcomes.push(o);
    }
    let passes = outcomes.iter().filter(|o| o.passed()).count();
    ensure(passes >= E2E_REQUIRED, || format!("{passes} of {} seeds passed", outcomes.len()))?;
    Ok(format!("{passes} of {} seeds passed", outcomes.len()))
}

fn protocol_fidelity() -> Check {
    let cfg = toy_config(0);
    let ds = Dataset::generate(&cfg.data, cfg.seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    let (lo, hi) = (cfg.train.frame_min, cfg.train.frame_max);
    ensure((lo, hi) == (5, 9), || format!("frame range {lo}..={hi}"))?;
    let mut counts = [0usize; 5];
    for _ in 0..FRAME_BATCHES {
        let t = trainer.sample_batch(&ds).map_err(|e| e.to_string())?.frames;
        ensure((lo..=hi).contains(&t), || format!("sampled T = {t}"))?;
        counts[t - lo] += 1;
    }
    ensure(counts.iter().all(|&c| c > 0), || format!("frame counts {counts:?}"))?;
    let expect = FRAME_BATCHES as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    ensure(chi2 < CHI2_CRITICAL_4DOF, || format!("χ² = {chi2:.2} for {counts:?}"))?;

    let mut robot = RunConfig::preset("robot").map_err(|e| e.to_string())?;
    robot.data.clips_per_class = 2;
    let rds = Dataset::generate(&robot.data, 1).map_err(|e| e.to_string())?;
    let mut rt = Trainer::new(&robot).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let b = rt.sample_batch(&rds).map_err(|e| e.to_string())?;
        ensure(b.frames == 16, || format!("robot batch with T = {}", b.frames))?;
    }
    let b = sample_batch(&rds, 4, (robot.train.frame_min, robot.train.frame_max), &mut ChaCha8Rng::seed_from_u64(2))
        .map_err(|e| e.to_string())?;
    ensure(b.frames == 16, || format!("robot batch with T = {}", b.frames))?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let classes = pathvid::data::CANONICAL_CLASSES;
    let (mut rmin, mut rmax) = (usize::MAX, 0);
    for q in 0..200 {
        let class = q % classes.len();
        let query = build_query(&classes[class], class, &cfg.eval, &mut rng).map_err(|e| e.to_string())?;
        ensure(query.pool.len() == POOL_SIZE, || format!("pool of {}", query.pool.len()))?;
        let r = query.num_related();
        ensure((6..=12).contains(&r), || format!("{r} related sentences"))?;
        rmin = rmin.min(r);
        rmax = rmax.max(r);
    }
    Ok(format!("T counts {counts:?} (χ² {chi2:.2}), robot T = 16, pools of {POOL_SIZE} with {rmin}..={rmax} related"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        (1, "gradient suite", gradient_suite),
        (2, "equation oracles", equation_oracles),
        (3, "spectral norm", spectral_norm),
        (4, "metric identities", metric_identities),
        (5, "structural invariants", structural_invariants),
        (6, "end-to-end toy experiment", end_to_end),
        (7, "protocol fidelity", protocol_fidelity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({took:.1?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({took:.1?}) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
