//! Per-frame latent paths: endpoint distributions regressed from the
//! sentence code, reparameterized endpoint draws, linear interpolation and
//! conditional batch normalization over `[z_i; noise]`.

use pathvid_nn::{Builder, CondBatchNorm, Dense, Session, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::text::TEXT_DIM;

/// Width of each sampled endpoint.
pub const LATENT_DIM: usize = 256;

/// Endpoint distribution parameters, each `[B, 256]`; sigmas are sigmoid
/// outputs.
#[derive(Clone, Copy, Debug)]
pub struct EndpointDistributions {
    pub mu_s: Var,
    pub mu_e: Var,
    pub sigma_s: Var,
    pub sigma_e: Var,
}

/// Every random draw of one generator pass.
#[derive(Clone, Debug)]
pub struct LatentNoise {
    /// Input noise of the endpoint regressor, `[B, noise_dim]`.
    pub f_input: Tensor,
    /// Standard normal draws for the endpoints, `[B, 256]` each.
    pub eps_s: Tensor,
    pub eps_e: Tensor,
    /// Noise concatenated to the path, `[B, noise_dim]` per video or
    /// `[B·T, noise_dim]` per frame.
    pub path: Tensor,
    /// Noise half of the normalization condition, `[B, noise_dim]`.
    pub cond: Tensor,
    pub frames: usize,
}

impl LatentNoise {
    /// Draws in a fixed order: F input, ε_s, ε_e, path noise, condition noise.
    pub fn sample<R: Rng + ?Sized>(b: usize, t: usize, noise_dim: usize, per_frame: bool, rng: &mut R) -> Self {
        let f_input = Tensor::randn(vec![b, noise_dim], rng);
        let eps_s = Tensor::randn(vec![b, LATENT_DIM], rng);
        let eps_e = Tensor::randn(vec![b, LATENT_DIM], rng);
        let rows = if per_frame { b * t } else { b };
        let path = Tensor::randn(vec![rows, noise_dim], rng);
        let cond = Tensor::randn(vec![b, noise_dim], rng);
        Self { f_input, eps_s, eps_e, path, cond, frames: t }
    }

    pub fn batch(&self) -> usize {
        self.f_input.shape()[0]
    }

    /// The same draws restricted to the videos in `idx`.
    pub fn select(&self, idx: &[usize]) -> Self {
        let path = if self.path.shape()[0] == self.batch() {
            self.path.select_rows(idx)
        } else {
            let t = self.frames;
            let rows: Vec<usize> = idx.iter().flat_map(|&i| (0..t).map(move |f| i * t + f)).collect();
            self.path.select_rows(&rows)
        };
        Self {
            f_input: self.f_input.select_rows(idx),
            eps_s: self.eps_s.select_rows(idx),
            eps_e: self.eps_e.select_rows(idx),
            path,
            cond: self.cond.select_rows(idx),
            frames: self.frames,
        }
    }
}

/// Interpolation weights `(a_i, b_i)` with `z_i = a_i z_start + b_i z_end`.
///
/// The default follows `z_i = ((T−i)/T) z₁ + (i/T) z_T` for `i = 1..T`,
/// which reaches `z_T` but not `z₁`; `exact_endpoints` uses
/// `(T−i)/(T−1)` and `(i−1)/(T−1)` so both ends are hit.
pub fn path_coefficients(t: usize, exact_endpoints: bool) -> Result<Vec<(f32, f32)>> {
    if t < 2 {
        return Err(Error::Contract(format!("latent path needs at least 2 frames, got {t}")));
    }
    let tf = t as f32;
    Ok((1..=t)
        .map(|i| {
            let i = i as f32;
            if exact_endpoints {
                ((tf - i) / (tf - 1.0), (i - 1.0) / (tf - 1.0))
            } else {
                ((tf - i) / tf, i / tf)
            }
        })
        .collect())
}

/// Rows `[B·T, d]` in video-major order from endpoints `[B, d]`.
pub fn interpolate_path(s: &mut Session, z_start: Var, z_end: Var, t: usize, exact_endpoints: bool) -> Result<Var> {
    let coeffs = path_coefficients(t, exact_endpoints)?;
    let b = s.graph.shape(z_start)[0];
    let rows: Vec<usize> = (0..b).flat_map(|v| std::iter::repeat_n(v, t)).collect();
    let a: Vec<f32> = (0..b).flat_map(|_| coeffs.iter().map(|c| c.0)).collect();
    let e: Vec<f32> = (0..b).flat_map(|_| coeffs.iter().map(|c| c.1)).collect();
    let zs = s.graph.index_rows(z_start, &rows)?;
    let ze = s.graph.index_rows(z_end, &rows)?;
    let zs = s.graph.row_scale(zs, &a)?;
    let ze = s.graph.row_scale(ze, &e)?;
    Ok(s.graph.add(zs, ze)?)
}

/// Plain-tensor version of [`interpolate_path`] for a single video.
pub fn interpolate(z_start: &[f32], z_end: &[f32], t: usize, exact_endpoints: bool) -> Result<Tensor> {
    if z_start.len() != z_end.len() {
        return Err(Error::Contract("endpoint widths differ".into()));
    }
    let d = z_start.len();
    let coeffs = path_coefficients(t, exact_endpoints)?;
    let mut out = Vec::with_capacity(t * d);
    for (a, b) in coeffs {
        out.extend(z_start.iter().zip(z_end).map(|(&x, &y)| a * x + b * y));
    }
    Ok(Tensor::new(vec![t, d], out)?)
}

/// Output of [`LatentPathNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LatentPath {
    pub dist: EndpointDistributions,
    pub z_start: Var,
    pub z_end: Var,
    /// `[B·T, 256]`.
    pub raw: Var,
    /// `[B·T, 256 + noise_dim]`.
    pub conditioned: Var,
    /// Per-video condition `[e(S); noise]`, `[B, 256 + noise_dim]`.
    pub condition: Var,
}

/// The endpoint regressor `F` and the path normalization.
#[derive(Clone, Debug)]
pub struct LatentPathNet {
    pub f1: Dense,
    pub f2: Dense,
    pub f3: Dense,
    pub cbn: CondBatchNorm,
    pub noise_dim: usize,
    pub exact_endpoints: bool,
    pub slope: f32,
}

impl LatentPathNet {
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        noise_dim: usize,
        hidden: usize,
        exact_endpoints: bool,
        slope: f32,
    ) -> Result<Self> {
        let width = LATENT_DIM + noise_dim;
        Ok(Self {
            f1: b.dense("f1", TEXT_DIM + noise_dim, hidden, true)?,
            f2: b.dense("f2", hidden, hidden, true)?,
            f3: b.dense("f3", hidden, 4 * LATENT_DIM, true)?,
            cbn: b.cond_batch_norm("cbn", width, TEXT_DIM + noise_dim)?,
            noise_dim,
            exact_endpoints,
            slope,
        })
    }

    /// `F([e(S); noise])` split into `(μ_s, μ_e, σ_s, σ_e)`.
    pub fn predict_endpoints(&self, s: &mut Session, e: Var, noise: Var) -> Result<EndpointDistributions> {
        let x = s.graph.concat(&[e, noise], 1)?;
        let h = self.f1.forward(s, x)?;
        let h = s.graph.leaky_relu(h, self.slope);
        let h = self.f2.forward(s, h)?;
        let h = s.graph.leaky_relu(h, self.slope);
        let out = self.f3.forward(s, h)?;
        let mu_s = s.graph.slice(out, 1, 0, LATENT_DIM)?;
        let mu_e = s.graph.slice(out, 1, LATENT_DIM, LATENT_DIM)?;
        let ls = s.graph.slice(out, 1, 2 * LATENT_DIM, LATENT_DIM)?;
        let le = s.graph.slice(out, 1, 3 * LATENT_DIM, LATENT_DIM)?;
        Ok(EndpointDistributions {
            mu_s,
            mu_e,
            sigma_s: s.graph.sigmoid(ls),
            sigma_e: s.graph.sigmoid(le),
        })
    }

    /// Concatenates path noise and normalizes over all `B·T` rows with the
    /// per-video condition broadcast to its frames. Returns the conditioned
    /// path and the per-video condition.
    pub fn condition_path(&self, s: &mut Session, raw: Var, e: Var, noise: &LatentNoise) -> Result<(Var, Var)> {
        let t = noise.frames;
        let b = s.graph.shape(e)[0];
        let repeat: Vec<usize> = (0..b).flat_map(|v| std::iter::repeat_n(v, t)).collect();
        let path_noise = s.constant(noise.path.clone());
        let path_noise = if noise.path.shape()[0] == b {
            s.graph.index_rows(path_noise, &repeat)?
        } else {
            path_noise
        };
        let x = s.graph.concat(&[raw, path_noise], 1)?;
        let cond_noise = s.constant(noise.cond.clone());
        let condition = s.graph.concat(&[e, cond_noise], 1)?;
        let cond_rows = s.graph.index_rows(condition, &repeat)?;
        let y = self.cbn.forward(s, x, cond_rows)?;
        Ok((y, condition))
    }

    pub fn forward(&self, s: &mut Session, e: Var, noise: &LatentNoise) -> Result<LatentPath> {
        let b = s.graph.shape(e)[0];
        if noise.batch() != b {
            return Err(Error::Contract(format!("noise drawn for {} videos, batch has {b}", noise.batch())));
        }
        let f_in = s.constant(noise.f_input.clone());
        let dist = self.predict_endpoints(s, e, f_in)?;
        let (z_start, z_end) = sample_endpoints(s, &dist, &noise.eps_s, &noise.eps_e)?;
        let raw = interpolate_path(s, z_start, z_end, noise.frames, self.exact_endpoints)?;
        let (conditioned, condition) = self.condition_path(s, raw, e, noise)?;
        Ok(LatentPath {
            dist,
            z_start,
            z_end,
            raw,
            conditioned,
            condition,
        })
    }
}

/// `z = μ + σ ⊙ ε` for both endpoints.
pub fn sample_endpoints(s: &mut Session, dist: &EndpointDistributions, eps_s: &Tensor, eps_e: &Tensor) -> Result<(Var, Var)> {
    let es = s.constant(eps_s.clone());
    let ee = s.constant(eps_e.clone());
    let ns = s.graph.mul(dist.sigma_s, es)?;
    let ne = s.graph.mul(dist.sigma_e, ee)?;
    Ok((s.graph.add(dist.mu_s, ns)?, s.graph.add(dist.mu_e, ne)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbatim_coefficients_hit_only_the_last_endpoint() {
        let c = path_coefficients(4, false).unwrap();
        assert_eq!(c, vec![(0.75, 0.25), (0.5, 0.5), (0.25, 0.75), (0.0, 1.0)]);
        let c = path_coefficients(4, true).unwrap();
        assert_eq!(c.first(), Some(&(1.0, 0.0)));
        assert_eq!(c.last(), Some(&(0.0, 1.0)));
        assert!(path_coefficients(1, false).is_err());
    }
}
