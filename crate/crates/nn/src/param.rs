//! Parameter storage, initialization, and spectral-norm state.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NnError, Result};
use crate::graph::{sigma_uv, Gradients};
use crate::tensor::Tensor;

pub const SPECTRAL_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight.
    Weight,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub spectral: Option<SpectralState>,
}

impl Parameter {
    /// Rows and columns of the `[shape[0], rest]` matrix view.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let rows = self.value.shape()[0];
        (rows, self.value.len() / rows)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value,
            grad,
            spectral: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of trainable weights whose name starts with any of `prefixes`.
    pub fn weights_with_prefix<'a>(&'a self, prefixes: &'a [&str]) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.kind == ParamKind::Weight && prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Attaches spectral normalization with a random unit-norm `u`.
    pub fn attach_spectral<R: Rng + ?Sized>(&mut self, id: ParamId, rng: &mut R) {
        let p = &mut self.params[id.0];
        let (rows, cols) = p.matrix_dims();
        let mut u: Vec<f32> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize_in_place(&mut u);
        let mut v = vec![0.0f32; cols];
        mat_t_vec(p.value.data(), &u, &mut v);
        normalize_in_place(&mut v);
        p.spectral = Some(SpectralState { u, v });
    }

    /// Runs `iterations` power-iteration steps on one parameter's state.
    pub fn power_iterate(&mut self, id: ParamId, iterations: usize) {
        let p = &mut self.params[id.0];
        let Some(state) = p.spectral.as_mut() else { return };
        for _ in 0..iterations {
            mat_t_vec(p.value.data(), &state.u, &mut state.v);
            normalize_in_place(&mut state.v);
            mat_vec(p.value.data(), &state.v, &mut state.u);
            normalize_in_place(&mut state.u);
        }
    }

    /// Power-iterates every spectrally normalized weight named with one of
    /// `prefixes`.
    pub fn power_iterate_prefixed(&mut self, prefixes: &[&str], iterations: usize) {
        let ids: Vec<ParamId> = self.weights_with_prefix(prefixes).collect();
        for id in ids {
            self.power_iterate(id, iterations);
        }
    }

    /// Current estimate `σ̂ = uᵀ W v` of the top singular value.
    pub fn sigma_estimate(&self, id: ParamId) -> Option<f32> {
        let p = &self.params[id.0];
        p.spectral.as_ref().map(|s| sigma_uv(p.value.data(), &s.u, &s.v))
    }

    /// Runs `iterations` power-iteration steps and returns `W / σ̂`.
    pub fn spectral_normalize(&mut self, id: ParamId, iterations: usize) -> Result<Tensor> {
        if self.params[id.0].spectral.is_none() {
            return Err(NnError::Usage(format!(
                "parameter `{}` has no spectral state",
                self.params[id.0].name
            )));
        }
        self.power_iterate(id, iterations);
        let sigma = self.sigma_estimate(id).unwrap_or(0.0).max(SPECTRAL_EPS);
        Ok(self.params[id.0].value.map(|w| w / sigma))
    }
}

fn normalize_in_place(v: &mut [f32]) {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
    let n = n.max(SPECTRAL_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}

fn mat_vec(w: &[f32], v: &[f32], out: &mut [f32]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
    }
}

fn mat_t_vec(w: &[f32], u: &[f32], out: &mut [f32]) {
    let cols = out.len();
    let mut acc = vec![0.0f64; cols];
    for (r, &ur) in u.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += ur as f64 * x as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// Orthogonal initialization of the `[shape[0], rest]` matrix view: rows
/// orthonormal when `rows <= cols`, columns orthonormal otherwise.
pub fn orthogonal<R: Rng + ?Sized>(shape: &[usize], gain: f32, rng: &mut R) -> Tensor {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product::<usize>().max(1);
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign correction makes the distribution uniform (Haar)
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data: Vec<f32> = if rows >= cols {
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| (q[(i, j)] as f32) * gain)
            .collect()
    } else {
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| (q[(j, i)] as f32) * gain)
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("orthogonal init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(&[4, 3, 3], 1.0, &mut rng);
        let d = w.data();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f32 = (0..9).map(|k| d[i * 9 + k] * d[j * 9 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(vec![2]), ParamKind::Weight).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![2]), ParamKind::Weight).is_err());
    }

    #[test]
    fn diagonal_matrix_normalizes_to_unit_top_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 0.5]).unwrap(), ParamKind::Weight)
            .unwrap();
        s.attach_spectral(id, &mut rng);
        let w = s.spectral_normalize(id, 30).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-4);
        assert!((w.data()[3] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![3, 4]), ParamKind::Weight).unwrap();
        s.attach_spectral(id, &mut rng);
        let w = s.spectral_normalize(id, 5).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
    }
}
