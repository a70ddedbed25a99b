use pathvid_nn::{Builder, Graph, NnError, NormMode, ParamKind, ParamStore, Session, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn dense_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[1, 2], &[1., 2.]));
    let w = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2], &[0., 0.]));
    let y = g.matmul(x, w).unwrap();
    let y = g.add_channel(y, b).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2.]);

    let x = g.constant(t(&[1, 2], &[1., 1.]));
    let w = g.constant(t(&[2, 2], &[2., 0., 0., 3.]));
    let b = g.constant(t(&[2], &[1., 1.]));
    let y = g.matmul(x, w).unwrap();
    let y = g.add_channel(y, b).unwrap();
    assert_eq!(g.value(y).data(), &[3., 4.]);

    let x = g.constant(Tensor::zeros(vec![3, 2]));
    let y = g.matmul(x, w).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros(vec![1, 3]));
    match g.matmul(bad, w) {
        Err(NnError::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("left operand"));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f32));
    let id = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
    let y = g.conv(x, id, None, &[1, 1], &[0, 0]).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = g.conv(ones, w, None, &[1, 1], &[0, 0]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);

    let zero_w = g.constant(Tensor::zeros(vec![2, 1, 3, 3]));
    let b = g.constant(t(&[2], &[0.5, -1.0]));
    let y = g.conv(ones, zero_w, Some(b), &[1, 1], &[1, 1]).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 3, 3]);
    assert!(g.value(y).data()[..9].iter().all(|&v| v == 0.5));
    assert!(g.value(y).data()[9..].iter().all(|&v| v == -1.0));

    let big = g.constant(Tensor::ones(vec![1, 1, 5, 5]));
    assert!(matches!(
        g.conv(ones, big, None, &[1, 1], &[0, 0]),
        Err(NnError::Dimension { .. })
    ));
}

#[test]
fn conv3d_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::from_fn(vec![1, 1, 2, 3, 3], |i| (i as f32).sin()));
    let id = g.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
    let y = g.conv(x, id, None, &[1, 1, 1], &[0, 0, 0]).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
    let y = g.conv(ones, ones, None, &[1, 1, 1], &[0, 0, 0]).unwrap();
    assert_eq!(g.value(y).data(), &[27.0]);

    let zero = g.constant(Tensor::zeros(vec![1, 1, 3, 3, 3]));
    let b = g.constant(t(&[1], &[2.5]));
    let y = g.conv(zero, ones, Some(b), &[1, 1, 1], &[1, 1, 1]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[2, 1], &[2., 4.]));
    let (y, _) = g.normalize(x, 1e-5, None).unwrap();
    close(g.value(y).data(), &[-1., 1.], 1e-4);

    let x = g.constant(t(&[2, 1], &[5., 5.]));
    let (y, _) = g.normalize(x, 1e-5, None).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0.]);

    let x = g.constant(t(&[1, 3], &[1., 2., 3.]));
    assert!(matches!(
        g.normalize(x, 1e-5, None),
        Err(NnError::DegenerateBatch { got: 1, .. })
    ));
}

#[test]
fn batch_norm_of_standardized_column_is_nearly_identity() {
    // exactly standardized column: brute-force the population stats
    let raw = [0.3f32, -1.2, 0.8, 1.9, -0.4, -1.4];
    let n = raw.len() as f32;
    let m: f32 = raw.iter().sum::<f32>() / n;
    let sd = (raw.iter().map(|v| (v - m).powi(2)).sum::<f32>() / n).sqrt();
    let col: Vec<f32> = raw.iter().map(|v| (v - m) / sd).collect();
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[6, 1], &col));
    let (y, _) = g.normalize(x, 1e-5, None).unwrap();
    close(g.value(y).data(), &col, 1e-4);
}

#[test]
fn batch_norm_moments_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for b in [8usize, 16, 33] {
        let x = Tensor::randn(vec![b, 5], &mut rng).map(|v| 3.0 * v + 2.0);
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let (y, _) = g.normalize(xv, 1e-5, None).unwrap();
        let d = g.value(y).data();
        for f in 0..5 {
            let col: Vec<f64> = (0..b).map(|i| d[i * 5 + f] as f64).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / b as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-2, "variance {v}");
        }
    }
}

fn cbn_store(features: usize, cond: usize) -> (ParamStore, pathvid_nn::CondBatchNorm) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cbn = Builder::new(&mut store, &mut rng, "cbn").cond_batch_norm("n", features, cond).unwrap();
    (store, cbn)
}

#[test]
fn cond_batch_norm_examples() {
    let (store, cbn) = cbn_store(1, 3);
    let mut s = Session::eval(&store);
    let x = s.constant(t(&[2, 1], &[2., 4.]));
    let c = s.constant(t(&[2, 3], &[0.3, -1., 2., 0.3, -1., 2.]));
    let y = cbn.forward(&mut s, x, c).unwrap();
    close(s.value(y).data(), &[-1., 1.], 1e-4);

    let x = s.constant(t(&[2, 1], &[7., 7.]));
    let y = cbn.forward(&mut s, x, c).unwrap();
    close(s.value(y).data(), &[0., 0.], 1e-6);

    // batch means of the modulation are exactly 1 and 0 for any condition
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = s.constant(Tensor::randn(vec![5, 3], &mut rng));
    let (gm, bm) = cbn.modulation(&mut s, c).unwrap();
    close(&[s.value(gm).mean()], &[1.0], 1e-6);
    close(&[s.value(bm).mean()], &[0.0], 1e-6);

    let bad = s.constant(Tensor::zeros(vec![3, 3]));
    let x = s.constant(Tensor::zeros(vec![2, 1]));
    assert!(cbn.forward(&mut s, x, bad).is_err());
}

#[test]
fn cond_batch_norm_with_constant_condition_equals_plain_norm() {
    let (store, cbn) = cbn_store(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = Tensor::randn(vec![8, 4, 3, 3], &mut rng);
    let row = Tensor::randn(vec![6], &mut rng);
    let ct = Tensor::from_fn(vec![8, 6], |i| row.data()[i % 6]);
    let mut s = Session::eval(&store);
    let x = s.constant(xt);
    let c = s.constant(ct);
    let y = cbn.forward(&mut s, x, c).unwrap();
    let (plain, _) = s.graph.normalize(x, 1e-5, None).unwrap();
    close(s.value(y).data(), s.value(plain).data(), 1e-5);
}

#[test]
fn spatial_cond_batch_norm_examples() {
    let (store, cbn) = cbn_store(2, 2);
    let mut s = Session::eval(&store);
    // channel 0 holds {2, 4} equally split, channel 1 is constant
    let x = s.constant(t(&[2, 2, 1, 2], &[2., 4., 9., 9., 4., 2., 9., 9.]));
    let c = s.constant(t(&[2, 2], &[1., 1., 1., 1.]));
    let y = cbn.forward(&mut s, x, c).unwrap();
    close(s.value(y).data(), &[-1., 1., 0., 0., 1., -1., 0., 0.], 1e-4);
}

#[test]
fn running_mode_freezes_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let bn = Builder::new(&mut store, &mut rng, "t").batch_norm("bn", 3).unwrap();
    let xt = Tensor::randn(vec![6, 3], &mut rng);
    let mut s = Session::train(&store, &["t."]);
    let x = s.constant(xt.clone());
    bn.forward(&mut s, x).unwrap();
    let (_, updates) = s.finish();
    assert!(!updates.is_empty());
    updates.apply(&mut store);
    let mean = store.get(bn.running.mean).value.clone();
    assert!(mean.data().iter().any(|&v| v != 0.0));

    let eval = |store: &ParamStore, rows: usize| {
        let mut s = Session::eval(store).with_mode(NormMode::Running);
        let x = s.constant(xt.select_rows(&(0..rows).collect::<Vec<_>>()));
        let y = bn.forward(&mut s, x).unwrap();
        s.value(y).clone()
    };
    let a = eval(&store, 6);
    let b = eval(&store, 6);
    assert_eq!(a, b);
    // frozen statistics make rows independent of the rest of the batch
    let one = eval(&store, 1);
    assert_eq!(one.data(), &a.data()[..3]);
}

#[test]
fn activation_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[3], &[-1., 0., 3.]));
    let l = g.leaky_relu(x, 0.2);
    close(g.value(l).data(), &[-0.2, 0., 3.], 1e-7);
    let th = g.tanh(x);
    assert_eq!(g.value(th).data()[1], 0.0);
    let sg = g.sigmoid(x);
    assert_eq!(g.value(sg).data()[1], 0.5);
    let big = g.constant(t(&[4], &[-100., -20., 20., 100.]));
    let sg = g.sigmoid(big);
    assert!(g.value(sg).data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
}

#[test]
fn upsample_and_pool_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let up = g.upsample2x(x).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let p = g.avg_pool2x(x).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);
    let c = g.constant(Tensor::full(vec![1, 2, 4, 4], 0.75));
    let p = g.avg_pool2x(c).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.75));
    let odd = g.constant(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(matches!(g.avg_pool2x(odd), Err(NnError::Dimension { .. })));
}

#[test]
fn sobel_examples() {
    let mut g = Graph::no_grad();
    let flat = g.constant(Tensor::full(vec![1, 3, 5, 5], 0.4));
    let e = g.sobel(flat).unwrap();
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));

    // vertical step: columns 0..3 are 0, columns 3..6 are 1 (all channels)
    let (h, w) = (4, 6);
    let step_v = Tensor::from_fn(vec![1, 3, h, w], |i| if i % w >= 3 { 1.0 } else { 0.0 });
    let sv = g.constant(step_v);
    let ev = g.sobel(sv).unwrap();
    let d = g.value(ev).data().to_vec();
    // at columns 2 and 3 the kernel spans the step: |G_x| = (1+2+1)·1 = 4
    for y in 0..h {
        for x in 0..w {
            let want = if x == 2 || x == 3 { 4.0 } else { 0.0 };
            assert!((d[y * w + x] - want).abs() < 1e-5, "({y},{x}) = {}", d[y * w + x]);
        }
    }

    // horizontal step on the transposed grid gives the transposed magnitudes
    let step_h = Tensor::from_fn(vec![1, 3, w, h], |i| if (i % (w * h)) / h >= 3 { 1.0 } else { 0.0 });
    let sh = g.constant(step_h);
    let eh = g.sobel(sh).unwrap();
    let dh = g.value(eh).data();
    for y in 0..h {
        for x in 0..w {
            assert!((dh[x * h + y] - d[y * w + x]).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(vec![2, 2]), true);
    assert!(matches!(g.backward(x), Err(NnError::Usage(_))));
    let mut ng = Graph::no_grad();
    let y = ng.constant(Tensor::scalar(1.0));
    assert!(matches!(ng.backward(y), Err(NnError::Usage(_))));
}

#[test]
fn gradient_of_weighted_sum_by_hand() {
    // loss = sum(x · W) with x fixed: dL/dW[i][j] = x[i] summed over rows
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let w = g.leaf(Tensor::zeros(vec![3, 2]), true);
    let unused = g.leaf(Tensor::ones(vec![4]), true);
    let y = g.matmul(x, w).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[5., 5., 7., 7., 9., 9.]);
    assert!(grads.get(unused).is_none());
}

#[test]
fn parameter_gradients_reach_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let dense = Builder::new(&mut store, &mut rng, "net").dense("fc", 3, 2, true).unwrap();
    let frozen = store.add("other.w", Tensor::ones(vec![2]), ParamKind::Weight).unwrap();
    let mut s = Session::train(&store, &["net."]);
    let x = s.constant(t(&[1, 3], &[1., 2., 3.]));
    let y = dense.forward(&mut s, x).unwrap();
    let fw = s.param(frozen).unwrap();
    let y2 = s.graph.mul_channel(y, fw).unwrap();
    let loss = s.graph.sum(y2);
    let (graph, _) = s.finish();
    let grads = graph.backward(loss).unwrap();
    store.accumulate(&grads);
    assert_eq!(store.get(dense.weight).grad.data(), &[1., 1., 2., 2., 3., 3.]);
    assert_eq!(store.get(dense.bias.unwrap()).grad.data(), &[1., 1.]);
    assert!(store.get(frozen).grad.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn upsample_then_subsample_is_identity(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![2, h, w], &mut rng);
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let up = g.upsample2x(xv).unwrap();
        let u = g.value(up).data();
        for o in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    prop_assert_eq!(u[o * 4 * h * w + 2 * y * 2 * w + 2 * xx], x.data()[o * h * w + y * w + xx]);
                }
            }
        }
        let back = g.avg_pool2x(up).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn sobel_is_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::randn(vec![2, 3, 5, 4], &mut rng));
        let e = g.sobel(x).unwrap();
        prop_assert!(g.value(e).data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
