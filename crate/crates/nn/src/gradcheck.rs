//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub rel_errors: Vec<f32>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f32 {
        self.rel_errors.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// Checks the gradient of `Σ f(inputs) ⊙ weights` with respect to every
/// input, with step `h`. `weights` must match the output shape of `f`; the
/// loss is accumulated in `f64` so the numeric side is limited by `f`'s
/// own `f32` rounding only.
pub fn check<F>(inputs: &[Tensor], weights: &Tensor, h: f32, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            num.data_mut()[i] = ((plus - minus) / (2.0 * h as f64)) as f32;
        }
        numeric.push(num);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.max_abs().max(n.max_abs()).max(1e-6);
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()));
            diff / scale
        })
        .collect();
    Ok(GradReport {
        rel_errors,
        analytic,
        numeric,
    })
}
