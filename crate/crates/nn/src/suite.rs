//! Finite-difference checks for every differentiable primitive, shared by
//! the crate tests and downstream acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::check;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f32 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f32 = 1e-2;
/// Largest input tensor, in elements.
pub const MAX_ELEMENTS: usize = 64;

type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One primitive (or a short composition) with its input generator.
pub struct Case {
    pub name: &'static str,
    make: Make,
    forward: Forward,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    forward: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        make: Box::new(make),
        forward: Box::new(forward),
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), rng)
}

/// Normal entries pushed away from zero, for ops with a kink at 0.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f32 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn unit(n: usize, phase: f32) -> Vec<f32> {
    let v: Vec<f32> = (0..n).map(|i| (i as f32 * 1.3 + phase).cos()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

impl Case {
    /// Worst relative error over `seeds` random draws.
    pub fn worst_error(&self, seeds: u64) -> Result<f32> {
        let mut worst = 0.0f32;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 17);
            let inputs = (self.make)(&mut rng);
            assert!(
                inputs.iter().all(|t| t.len() <= MAX_ELEMENTS),
                "{}: inputs exceed {MAX_ELEMENTS} elements",
                self.name
            );
            let shape = {
                let mut g = Graph::no_grad();
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = (self.forward)(&mut g, &vars)?;
                g.value(out).shape().to_vec()
            };
            let weights = rand_t(&mut rng, &shape);
            let report = check(&inputs, &weights, STEP, &self.forward)?;
            worst = worst.max(report.max_rel_error());
        }
        Ok(worst)
    }
}

/// Every differentiable primitive of the tape.
pub fn cases() -> Vec<Case> {
    let mut cases = Vec::new();
    cases.push(case(
        "dense",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 5]), rand_t(r, &[5])],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.add_channel(y, v[2])
        },
    ));

    cases.push(case(
        "conv2d",
        |r| {
            vec![
                rand_t(r, &[2, 2, 4, 4]),
                rand_t(r, &[3, 2, 3, 3]),
                rand_t(r, &[3]),
            ]
        },
        |g, v| g.conv(v[0], v[1], Some(v[2]), &[1, 1], &[1, 1]),
    ));

    cases.push(case(
        "conv2d strided",
        |r| vec![rand_t(r, &[1, 2, 5, 5]), rand_t(r, &[3, 2, 1, 1])],
        |g, v| g.conv(v[0], v[1], None, &[2, 2], &[0, 0]),
    ));
    cases.push(case(
        "conv2d 1x1",
        |r| {
            vec![
                rand_t(r, &[2, 3, 3, 3]),
                rand_t(r, &[4, 3, 1, 1]),
                rand_t(r, &[4]),
            ]
        },
        |g, v| g.conv(v[0], v[1], Some(v[2]), &[1, 1], &[0, 0]),
    ));

    cases.push(case(
        "conv3d",
        |r| {
            vec![
                rand_t(r, &[1, 2, 3, 3, 3]),
                rand_t(r, &[1, 2, 3, 3, 3]),
                rand_t(r, &[1]),
            ]
        },
        |g, v| g.conv(v[0], v[1], Some(v[2]), &[1, 1, 1], &[1, 1, 1]),
    ));

    cases.push(case(
        "batch_norm",
        |r| vec![rand_t(r, &[6, 4]), rand_t(r, &[4]), rand_t(r, &[4])],
        |g, v| {
            let (x, _) = g.normalize(v[0], 1e-5, None)?;
            let y = g.mul_channel(x, v[1])?;
            g.add_channel(y, v[2])
        },
    ));
    cases.push(case(
        "spatial batch_norm",
        |r| vec![rand_t(r, &[3, 2, 3, 3])],
        |g, v| Ok(g.normalize(v[0], 1e-5, None)?.0),
    ));

    // x̂ · (γ(c) − mean γ(c) + 1) + (β(c) − mean β(c)) with linear γ, β
    cases.push(case(
        "cond_batch_norm",
        |r| {
            vec![
                rand_t(r, &[4, 3, 2, 2]),
                rand_t(r, &[4, 5]),
                rand_t(r, &[5, 3]),
                rand_t(r, &[5, 3]),
            ]
        },
        |g, v| {
            let (xhat, _) = g.normalize(v[0], 1e-5, None)?;
            let gr = g.matmul(v[1], v[2])?;
            let br = g.matmul(v[1], v[3])?;
            let (gamma, _) = g.center_cols(gr, 1.0, None)?;
            let (beta, _) = g.center_cols(br, 0.0, None)?;
            g.sample_affine(xhat, gamma, beta)
        },
    ));

    cases.push(case(
        "leaky_relu",
        |r| vec![rand_away_from_zero(r, &[4, 8])],
        |g, v| Ok(g.leaky_relu(v[0], 0.2)),
    ));
    cases.push(case(
        "tanh",
        |r| vec![rand_t(r, &[4, 8])],
        |g, v| Ok(g.tanh(v[0])),
    ));
    cases.push(case(
        "sigmoid",
        |r| vec![rand_t(r, &[4, 8])],
        |g, v| Ok(g.sigmoid(v[0])),
    ));
    cases.push(case(
        "relu",
        |r| vec![rand_away_from_zero(r, &[4, 8])],
        |g, v| Ok(g.relu(v[0])),
    ));

    cases.push(case(
        "nn_upsample2x",
        |r| vec![rand_t(r, &[2, 2, 2, 3])],
        |g, v| g.upsample2x(v[0]),
    ));
    cases.push(case(
        "avg_pool2x",
        |r| vec![rand_t(r, &[2, 2, 4, 4])],
        |g, v| g.avg_pool2x(v[0]),
    ));
    cases.push(case(
        "avg_pool2x 3d",
        |r| vec![rand_t(r, &[1, 2, 2, 4, 4])],
        |g, v| g.avg_pool2x(v[0]),
    ));

    cases.push(case(
        "sobel_edges",
        |r| vec![rand_t(r, &[1, 3, 4, 5])],
        |g, v| g.sobel(v[0]),
    ));

    // u, v held constant; W gets a 3·u vᵀ component so that σ̂ = uᵀWv stays away from 0
    let (u, v) = (unit(4, 0.4), unit(6, 1.1));
    let (uc, vc) = (u.clone(), v.clone());
    cases.push(case(
        "spectral_norm",
        move |r| {
            let noise = rand_t(r, &[4, 2, 3]);
            vec![Tensor::from_fn(vec![4, 2, 3], |k| {
                noise.data()[k] + 3.0 * u[k / 6] * v[k % 6]
            })]
        },
        move |g, x| g.spectral_norm(x[0], &uc, &vc, 1e-12),
    ));

    cases.push(case(
        "reshape+permute",
        |r| vec![rand_t(r, &[2, 3, 4])],
        |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(y, vec![8, 3])
        },
    ));
    cases.push(case(
        "concat+slice",
        |r| vec![rand_t(r, &[2, 3, 2]), rand_t(r, &[2, 1, 2])],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            let t = g.tanh(s);
            g.mul(t, s)
        },
    ));
    cases.push(case(
        "index_rows+row_scale",
        |r| vec![rand_t(r, &[3, 4])],
        |g, v| {
            let y = g.index_rows(v[0], &[0, 2, 2, 1, 0])?;
            g.row_scale(y, &[0.5, 1.0, -2.0, 0.25, 3.0])
        },
    ));
    cases.push(case(
        "mean_keep",
        |r| vec![rand_t(r, &[2, 3, 2, 2])],
        |g, v| g.mean_keep(v[0], 2),
    ));
    cases.push(case(
        "batch_mean_frame",
        |r| vec![rand_t(r, &[2, 3, 2, 2, 2])],
        |g, v| {
            let m = g.batch_mean_frame(v[0])?;
            g.mul(m, v[0])
        },
    ));

    cases.push(case(
        "softmax_cross_entropy",
        |r| vec![rand_t(r, &[5, 3])],
        |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0]),
    ));
    cases.push(case(
        "l2_normalize_rows",
        |r| vec![rand_t(r, &[3, 5])],
        |g, v| g.l2_normalize_rows(v[0]),
    ));
    cases.push(case(
        "hinge",
        |r| vec![rand_away_from_zero(r, &[8])],
        |g, v| {
            let neg = g.scale(v[0], -1.0);
            let m = g.add_scalar(neg, 0.0);
            Ok(g.relu(m))
        },
    ));
    cases
}
