//! Parameterized layers built from graph primitives.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::graph::{BatchStats, Var};
use crate::param::{orthogonal, ParamId, ParamKind, ParamStore};
use crate::session::{NormMode, Session};
use crate::tensor::Tensor;

/// Default negative slope for leaky ReLU.
pub const LEAKY_SLOPE: f32 = 0.2;
pub const BN_EPS: f32 = 1e-5;

/// Creates named parameters under a dotted prefix.
pub struct Builder<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
    spectral: bool,
}

impl<'a, R: Rng + ?Sized> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.trim_end_matches('.').to_string(),
            spectral: false,
        }
    }

    /// Attach spectral normalization to weights created from here on.
    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    /// A child builder with `name` appended to the prefix.
    pub fn scope(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = self.join(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            spectral: self.spectral,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let value = orthogonal(shape, 1.0, self.rng);
        let id = self.store.add(self.join(name), value, ParamKind::Weight)?;
        if self.spectral {
            self.store.attach_spectral(id, self.rng);
        }
        Ok(id)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f32, kind: ParamKind) -> Result<ParamId> {
        self.store.add(self.join(name), Tensor::full(shape.to_vec(), value), kind)
    }

    pub fn dense(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Dense> {
        let mut s = self.scope(name);
        let weight = s.weight("weight", &[d_in, d_out])?;
        let bias = if bias {
            Some(s.filled("bias", &[d_out], 0.0, ParamKind::Weight)?)
        } else {
            None
        };
        Ok(Dense { weight, bias, d_in, d_out })
    }

    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        self.conv(name, c_in, c_out, vec![k, k], vec![stride; 2], vec![pad; 2], true)
    }

    /// [`Builder::conv2d`] without a bias.
    pub fn conv2d_bare(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        self.conv(name, c_in, c_out, vec![k, k], vec![stride; 2], vec![pad; 2], false)
    }

    pub fn conv3d(&mut self, name: &str, c_in: usize, c_out: usize, k: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Conv> {
        self.conv(name, c_in, c_out, k.to_vec(), stride.to_vec(), pad.to_vec(), true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        pad: Vec<usize>,
        bias: bool,
    ) -> Result<Conv> {
        let mut s = self.scope(name);
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(&kernel);
        let weight = s.weight("weight", &shape)?;
        let bias = if bias {
            Some(s.filled("bias", &[c_out], 0.0, ParamKind::Weight)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn batch_norm(&mut self, name: &str, features: usize) -> Result<BatchNorm> {
        let mut s = self.scope(name);
        Ok(BatchNorm {
            gamma: s.filled("gamma", &[features], 1.0, ParamKind::Weight)?,
            beta: s.filled("beta", &[features], 0.0, ParamKind::Weight)?,
            running: RunningStats::new(&mut s, features)?,
        })
    }

    pub fn cond_batch_norm(&mut self, name: &str, features: usize, cond_dim: usize) -> Result<CondBatchNorm> {
        let mut s = self.scope(name);
        let gamma_net = s.dense("gamma", cond_dim, features, false)?;
        let beta_net = s.dense("beta", cond_dim, features, false)?;
        let running = RunningStats::new(&mut s, features)?;
        let running_gamma = s.filled("running_gamma", &[features], 0.0, ParamKind::Buffer)?;
        let running_beta = s.filled("running_beta", &[features], 0.0, ParamKind::Buffer)?;
        Ok(CondBatchNorm {
            gamma_net,
            beta_net,
            running,
            running_gamma,
            running_beta,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    /// `x[B×d_in] · W[d_in×d_out] + b`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.d_in {
            return dim_err("dense", format!("input {:?} for a {}→{} layer", shape, self.d_in, self.d_out));
        }
        let w = s.param(self.weight)?;
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                s.graph.add_channel(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl Conv {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = match self.bias {
            Some(b) => Some(s.param(b)?),
            None => None,
        };
        s.graph.conv(x, w, b, &self.stride, &self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Running mean/variance buffers for a normalization layer.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

impl RunningStats {
    fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, features: usize) -> Result<Self> {
        Ok(Self {
            mean: b.filled("running_mean", &[features], 0.0, ParamKind::Buffer)?,
            var: b.filled("running_var", &[features], 1.0, ParamKind::Buffer)?,
        })
    }

    /// Normalizes `x` per channel according to the session's mode.
    pub fn normalize(&self, s: &mut Session, x: Var) -> Result<Var> {
        match s.mode() {
            NormMode::Batch => {
                let (y, stats) = s.graph.normalize(x, BN_EPS, None)?;
                s.update_running(self.mean, &stats.mean);
                s.update_running(self.var, &stats.var);
                Ok(y)
            }
            NormMode::Running => {
                let frozen = BatchStats {
                    mean: s.buffer(self.mean).data().to_vec(),
                    var: s.buffer(self.var).data().to_vec(),
                };
                Ok(s.graph.normalize(x, BN_EPS, Some(&frozen))?.0)
            }
        }
    }
}

/// Batch normalization with a learned per-feature affine.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let xhat = self.running.normalize(s, x)?;
        let g = s.param(self.gamma)?;
        let b = s.param(self.beta)?;
        let y = s.graph.mul_channel(xhat, g)?;
        s.graph.add_channel(y, b)
    }
}

/// Conditional batch normalization: the scale and shift are single linear
/// layers of a condition vector, re-centred so that over the batch the
/// scale averages 1 and the shift averages 0.
#[derive(Clone, Debug)]
pub struct CondBatchNorm {
    pub gamma_net: Dense,
    pub beta_net: Dense,
    pub running: RunningStats,
    pub running_gamma: ParamId,
    pub running_beta: ParamId,
}

impl CondBatchNorm {
    /// `x` is `[N, C, ...]`, `cond` is `[N, d_c]`.
    pub fn forward(&self, s: &mut Session, x: Var, cond: Var) -> Result<Var> {
        let n = s.graph.shape(x)[0];
        if s.graph.shape(cond)[0] != n {
            return dim_err(
                "cond_batch_norm",
                format!("condition batch {} for input batch {n}", s.graph.shape(cond)[0]),
            );
        }
        let xhat = self.running.normalize(s, x)?;
        let (gamma, beta) = self.modulation(s, cond)?;
        s.graph.sample_affine(xhat, gamma, beta)
    }

    /// The mean-shifted scale `γ(c) − mean γ(c) + 1` and shift
    /// `β(c) − mean β(c)`, each `[N, C]`.
    pub fn modulation(&self, s: &mut Session, cond: Var) -> Result<(Var, Var)> {
        let g_raw = self.gamma_net.forward(s, cond)?;
        let b_raw = self.beta_net.forward(s, cond)?;
        match s.mode() {
            NormMode::Batch => {
                let (g, gm) = s.graph.center_cols(g_raw, 1.0, None)?;
                let (b, bm) = s.graph.center_cols(b_raw, 0.0, None)?;
                s.update_running(self.running_gamma, &gm);
                s.update_running(self.running_beta, &bm);
                Ok((g, b))
            }
            NormMode::Running => {
                let gm = s.buffer(self.running_gamma).data().to_vec();
                let bm = s.buffer(self.running_beta).data().to_vec();
                let (g, _) = s.graph.center_cols(g_raw, 1.0, Some(&gm))?;
                let (b, _) = s.graph.center_cols(b_raw, 0.0, Some(&bm))?;
                Ok((g, b))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Conv3d,
    BatchNorm,
    CondBatchNorm,
    LeakyRelu,
    Tanh,
    Sigmoid,
    AvgPool,
    NnUpsample,
}

/// Static description of one layer, used for structural checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerConfig {
    pub fn simple(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: Vec::new(),
            stride: Vec::new(),
            padding: Vec::new(),
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn spatial_rank(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::AvgPool | LayerKind::NnUpsample => 2,
            LayerKind::Conv3d => 3,
            _ => 0,
        }
    }

    /// Kernel, stride, and padding lengths agree with the spatial rank.
    pub fn is_valid(&self) -> bool {
        let r = self.spatial_rank();
        let lens_ok = match self.kind {
            LayerKind::Conv2d | LayerKind::Conv3d => {
                self.kernel.len() == r && self.stride.len() == r && self.padding.len() == r
            }
            _ => self.kernel.is_empty() || self.kernel.len() == r,
        };
        lens_ok && self.in_channels > 0 && self.out_channels > 0
    }
}

impl Dense {
    pub fn config(&self) -> LayerConfig {
        LayerConfig {
            in_channels: self.d_in,
            out_channels: self.d_out,
            ..LayerConfig::simple(LayerKind::Dense, 1)
        }
    }
}

impl Conv {
    pub fn config(&self, store: &ParamStore) -> LayerConfig {
        let shape = store.get(self.weight).value.shape();
        LayerConfig {
            kind: if shape.len() == 5 { LayerKind::Conv3d } else { LayerKind::Conv2d },
            kernel: shape[2..].to_vec(),
            stride: self.stride.clone(),
            padding: self.pad.clone(),
            in_channels: shape[1],
            out_channels: shape[0],
        }
    }
}
