//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every method on [`Graph`] evaluates its operation eagerly and appends a
//! node to the tape. Nodes are appended in evaluation order, so walking the
//! tape backwards visits every node after all of its consumers.

use crate::error::{dim_err, NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::ParamId;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    SampleAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Normalize {
        x: Var,
        inv_std: Vec<f32>,
        frozen: bool,
    },
    CenterCols(Var, bool),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexRows(Var, Vec<usize>),
    RowScale(Var, Vec<f32>),
    MeanKeep(Var),
    SumAll(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
    Sobel {
        x: Var,
        gx: Vec<f32>,
        gy: Vec<f32>,
    },
    BatchMeanFrame(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics from a batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// An evaluation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    grad_enabled: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that took part in the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(v, id)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

/// `[outer, c, inner]` view of a tensor with channel axis 1.
fn channel_view(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return dim_err(op, format!("need rank >= 2, got {:?}", t.shape()));
    }
    let outer = t.shape()[0];
    let c = t.shape()[1];
    Ok((outer, c, t.len() / (outer * c)))
}

fn spatial_view(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let r = t.rank();
    if r < 2 {
        return dim_err(op, format!("need rank >= 2, got {:?}", t.shape()));
    }
    let h = t.shape()[r - 2];
    let w = t.shape()[r - 1];
    Ok((t.len() / (h * w), h, w))
}

impl Graph {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape for pure evaluation; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; `requires_grad` is ignored on a no-grad tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf bound to a stored parameter so its gradient can be collected.
    pub fn param_leaf(&mut self, id: ParamId, value: Tensor, trainable: bool) -> Var {
        let v = self.leaf(value, trainable);
        if self.nodes[v.0].requires_grad {
            self.params.push((v, id));
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let out = out.map_err(|_| self.shape_error("add", a, b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let out = out.map_err(|_| self.shape_error("sub", a, b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let out = out.map_err(|_| self.shape_error("mul", a, b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn shape_error(&self, op: &'static str, a: Var, b: Var) -> NnError {
        NnError::Dimension {
            op,
            detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
        }
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("left operand {sa:?} vs right operand {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `b[c]` along channel axis 1.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, c, inner) = channel_view("add_channel", self.value(x))?;
        if self.value(b).len() != c {
            return dim_err("add_channel", format!("bias has {} entries for {c} channels", self.value(b).len()));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        debug_assert_eq!(out.len(), outer * c * inner);
        Ok(self.push(out, Op::AddChannel(x, b), &[x, b]))
    }

    /// Multiplies by `g[c]` along channel axis 1.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, c, inner) = channel_view("mul_channel", self.value(x))?;
        if self.value(g).len() != c {
            return dim_err("mul_channel", format!("scale has {} entries for {c} channels", self.value(g).len()));
        }
        let mut out = self.value(x).clone();
        let scale = self.value(g).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let s = scale[i % c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulChannel(x, g), &[x, g]))
    }

    /// `x[n, c, ...] * gamma[n, c] + beta[n, c]`, broadcast over trailing axes.
    pub fn sample_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (outer, c, inner) = channel_view("sample_affine", self.value(x))?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(t) != [outer, c] {
                return dim_err(
                    "sample_affine",
                    format!("{name} is {:?}, expected [{outer}, {c}]", self.shape(t)),
                );
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * g[i] + b[i]);
        }
        Ok(self.push(out, Op::SampleAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Standardizes each channel (axis 1) over all other axes.
    ///
    /// With `frozen` statistics the given mean/variance are used as constants;
    /// otherwise batch statistics are computed (population variance) and
    /// returned so callers can track running estimates.
    pub fn normalize(
        &mut self,
        x: Var,
        eps: f32,
        frozen: Option<&BatchStats>,
    ) -> Result<(Var, BatchStats)> {
        let (outer, c, inner) = channel_view("normalize", self.value(x))?;
        let stats = match frozen {
            Some(s) => {
                if s.mean.len() != c || s.var.len() != c {
                    return dim_err("normalize", format!("frozen statistics for {} channels, input has {c}", s.mean.len()));
                }
                s.clone()
            }
            None => {
                if outer * inner < 2 {
                    return Err(NnError::DegenerateBatch {
                        op: "normalize",
                        got: outer * inner,
                    });
                }
                let (mean, var) = kernels::channel_stats(self.value(x).data(), outer, c, inner);
                BatchStats { mean, var }
            }
        };
        let inv_std: Vec<f32> = stats.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ch = i % c;
            let (m, s) = (stats.mean[ch], inv_std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        let var = self.push(
            out,
            Op::Normalize {
                x,
                inv_std,
                frozen: frozen.is_some(),
            },
            &[x],
        );
        Ok((var, stats))
    }

    /// `x - colmean(x) + target` for a 2D `x`, using `frozen_means` as the
    /// column means when given. Returns the batch column means as well.
    pub fn center_cols(
        &mut self,
        x: Var,
        target: f32,
        frozen_means: Option<&[f32]>,
    ) -> Result<(Var, Vec<f32>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("center_cols", format!("need a matrix, got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        let means: Vec<f32> = match frozen_means {
            Some(m) if m.len() == c => m.to_vec(),
            Some(m) => return dim_err("center_cols", format!("{} frozen means for {c} columns", m.len())),
            None => {
                let d = self.value(x).data();
                (0..c)
                    .map(|j| ((0..n).map(|i| d[i * c + j] as f64).sum::<f64>() / n as f64) as f32)
                    .collect()
            }
        };
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, m) in row.iter_mut().zip(&means) {
                *v = *v - m + target;
            }
        }
        let var = self.push(out, Op::CenterCols(x, frozen_means.is_some()), &[x]);
        Ok((var, means))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::LeakyRelu(x, 0.0), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (outer, h, w) = spatial_view("upsample2x", self.value(x))?;
        let data = kernels::upsample2x(self.value(x).data(), outer, h, w);
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// 2x2 average pooling of the two trailing axes.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (outer, h, w) = spatial_view("avg_pool2x", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err("avg_pool2x", format!("odd spatial extent {h}x{w}"));
        }
        let data = kernels::avg_pool2x(self.value(x).data(), outer, h, w);
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::AvgPool2x(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "nothing to concatenate");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return dim_err("concat", format!("{s:?} does not line up with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dim_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Gathers first-axis slices; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x)[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return dim_err("index_rows", format!("indices out of range for {n} rows"));
        }
        let out = self.value(x).select_rows(idx);
        Ok(self.push(out, Op::IndexRows(x, idx.to_vec()), &[x]))
    }

    /// Multiplies first-axis slice `i` by the constant `coeffs[i]`.
    pub fn row_scale(&mut self, x: Var, coeffs: &[f32]) -> Result<Var> {
        let n = self.shape(x)[0];
        if coeffs.len() != n {
            return dim_err("row_scale", format!("{} coefficients for {n} rows", coeffs.len()));
        }
        let mut out = self.value(x).clone();
        let w = out.len() / n;
        for (row, &c) in out.data_mut().chunks_mut(w).zip(coeffs) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, Op::RowScale(x, coeffs.to_vec()), &[x]))
    }

    /// Averages over every axis from `keep` on; the result has shape
    /// `shape[..keep]`.
    pub fn mean_keep(&mut self, x: Var, keep: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if keep == 0 || keep >= s.len() {
            return dim_err("mean_keep", format!("cannot keep {keep} axes of {s:?}"));
        }
        let outer: usize = s[..keep].iter().product();
        let inner = self.value(x).len() / outer;
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        let out = Tensor::new(s[..keep].to_vec(), data)?;
        Ok(self.push(out, Op::MeanKeep(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Cross-correlation. `x` is `[n, c, h, w]` (2D) or `[n, c, d, h, w]`
    /// (3D); `w` is `[o, c, k...]` of the same spatial rank.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let spatial = xs.len().saturating_sub(2);
        if !(spatial == 2 || spatial == 3)
            || ws.len() != xs.len()
            || stride.len() != spatial
            || pad.len() != spatial
        {
            return dim_err(
                "conv",
                format!("input {xs:?}, weight {ws:?}, stride {stride:?}, padding {pad:?}"),
            );
        }
        if ws[1] != xs[1] {
            return dim_err("conv", format!("weight expects {} input channels, input has {}", ws[1], xs[1]));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return dim_err("conv", format!("bias has {} entries for {} filters", self.value(b).len(), ws[0]));
            }
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if v.len() == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let geom = ConvGeom::new(
            xs[0],
            xs[1],
            ws[0],
            lift(&xs[2..], 1),
            lift(&ws[2..], 1),
            lift(stride, 1),
            lift(pad, 0),
        )
        .ok_or_else(|| NnError::Dimension {
            op: "conv",
            detail: format!("kernel {:?} larger than padded input {:?}", &ws[2..], &xs[2..]),
        })?;
        let bias = b.map(|b| self.value(b).data().to_vec());
        let data = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), bias.as_deref());
        let mut shape = vec![xs[0], ws[0]];
        if spatial == 2 {
            shape.extend_from_slice(&geom.output[1..]);
        } else {
            shape.extend_from_slice(&geom.output);
        }
        let out = Tensor::new(shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// `W / σ` with `σ = uᵀ W v` for the matrix view `[shape[0], rest]` of
    /// `w`. `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f32], v: &[f32], eps: f32) -> Result<Var> {
        let t = self.value(w);
        let rows = t.shape()[0];
        let cols = t.len() / rows;
        if u.len() != rows || v.len() != cols {
            return dim_err("spectral_norm", format!("u/v of length {}/{} for a {rows}x{cols} matrix", u.len(), v.len()));
        }
        let sigma = sigma_uv(t.data(), u, v).max(eps);
        let out = t.map(|x| x / sigma);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            &[w],
        ))
    }

    /// Luminance Sobel gradient magnitude of `[n, 3, h, w]` images,
    /// replicate-padded; returns `[n, 1, h, w]`.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return dim_err("sobel", format!("expected [n, 3, h, w], got {s:?}"));
        }
        let (gx, gy, mag) = kernels::sobel(self.value(x).data(), s[0], s[2], s[3]);
        let out = Tensor::new(vec![s[0], 1, s[2], s[3]], mag)?;
        Ok(self.push(out, Op::Sobel { x, gx, gy }, &[x]))
    }

    /// Replaces every frame of a `[b, c, t, h, w]` video batch by the mean
    /// frame over all `b·t` frames.
    pub fn batch_mean_frame(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return dim_err("batch_mean_frame", format!("expected [b, c, t, h, w], got {s:?}"));
        }
        let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        let src = self.value(x).data();
        let mut mean = vec![0.0f64; c * hw];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let base = ((bi * c + ci) * t + ti) * hw;
                    for (m, &v) in mean[ci * hw..(ci + 1) * hw].iter_mut().zip(&src[base..base + hw]) {
                        *m += v as f64;
                    }
                }
            }
        }
        let inv = 1.0 / (b * t) as f64;
        let mean: Vec<f32> = mean.iter().map(|&m| (m * inv) as f32).collect();
        let mut data = Vec::with_capacity(src.len());
        for _ in 0..b {
            for ci in 0..c {
                for _ in 0..t {
                    data.extend_from_slice(&mean[ci * hw..(ci + 1) * hw]);
                }
            }
        }
        let out = Tensor::new(s, data)?;
        Ok(self.push(out, Op::BatchMeanFrame(x), &[x]))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return dim_err("softmax_cross_entropy", format!("logits {s:?} with {} labels", labels.len()));
        }
        let probs = softmax_rows(self.value(logits).data(), s[1]);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * s[1] + l].max(1e-30) as f64).ln())
            .sum::<f64>()
            / s[0] as f64;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Scales each row of `[n, d]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("l2_normalize_rows", format!("need a matrix, got {s:?}"));
        }
        let d = s[1];
        let norms: Vec<f32> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<f32>().sqrt().max(1e-12))
            .collect();
        let mut out = self.value(x).clone();
        for (row, n) in out.data_mut().chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Runs reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::Usage("backward on a node that is not on this tape".into()));
        }
        if !self.grad_enabled {
            return Err(NnError::Usage("backward on a tape recorded without gradients".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0.0f32; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddChannel(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    let (_, c, inner) = channel_view("add_channel", g)?;
                    let mut db = vec![0.0f32; c];
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        db[j % c] += chunk.iter().sum::<f32>();
                    }
                    self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::MulChannel(x, s) => {
                let (_, c, inner) = channel_view("mul_channel", g)?;
                let scale = self.value(*s).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (j, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let sc = scale[j % c];
                        chunk.iter_mut().for_each(|v| *v *= sc);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*s) {
                    let mut ds = vec![0.0f32; c];
                    for (j, (gc, xc)) in g
                        .data()
                        .chunks(inner)
                        .zip(self.value(*x).data().chunks(inner))
                        .enumerate()
                    {
                        ds[j % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f32>();
                    }
                    self.acc(grads, *s, Tensor::new(self.shape(*s).to_vec(), ds)?);
                }
            }
            Op::SampleAffine { x, gamma, beta } => {
                let (_, _, inner) = channel_view("sample_affine", g)?;
                let gm = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (j, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= gm[j]);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let dg: Vec<f32> = g
                        .data()
                        .chunks(inner)
                        .zip(self.value(*x).data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dg)?);
                }
                if self.needs(*beta) {
                    let db: Vec<f32> = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), db)?);
                }
            }
            Op::Normalize { x, inv_std, frozen } => {
                let (outer, c, inner) = channel_view("normalize", g)?;
                let mut dx = g.clone();
                if *frozen {
                    for (j, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let s = inv_std[j % c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                } else {
                    let xhat = node.value.data();
                    let m = (outer * inner) as f64;
                    let mut mean_g = vec![0.0f64; c];
                    let mut mean_gx = vec![0.0f64; c];
                    for (j, (gc, xc)) in g.data().chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        let ch = j % c;
                        for (&a, &b) in gc.iter().zip(xc) {
                            mean_g[ch] += a as f64;
                            mean_gx[ch] += a as f64 * b as f64;
                        }
                    }
                    for ch in 0..c {
                        mean_g[ch] /= m;
                        mean_gx[ch] /= m;
                    }
                    for (j, (dc, xc)) in dx.data_mut().chunks_mut(inner).zip(xhat.chunks(inner)).enumerate() {
                        let ch = j % c;
                        let (mg, mgx, s) = (mean_g[ch] as f32, mean_gx[ch] as f32, inv_std[ch]);
                        for (d, &xh) in dc.iter_mut().zip(xc) {
                            *d = s * (*d - mg - xh * mgx);
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::CenterCols(x, frozen) => {
                if *frozen {
                    self.acc(grads, *x, g.clone());
                } else {
                    let (n, c) = (g.shape()[0], g.shape()[1]);
                    let d = g.data();
                    let means: Vec<f32> = (0..c)
                        .map(|j| ((0..n).map(|i| d[i * c + j] as f64).sum::<f64>() / n as f64) as f32)
                        .collect();
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(c) {
                        for (v, m) in row.iter_mut().zip(&means) {
                            *v -= m;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { slope * gv })?;
                self.acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                self.acc(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let (outer, h, w) = spatial_view("upsample2x", self.value(*x))?;
                let dx = kernels::upsample2x_backward(g.data(), outer, h, w);
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::AvgPool2x(x) => {
                let (outer, h, w) = spatial_view("avg_pool2x", self.value(*x))?;
                let dx = kernels::avg_pool2x_backward(g.data(), outer, h, w);
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.clone().reshape(self.shape(*x).to_vec())?);
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.acc(grads, *x, g.permute(&inv)?);
            }
            Op::Concat { parts, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut dx = Tensor::zeros(xs.to_vec());
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, dx);
            }
            Op::IndexRows(x, idx) => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let w = g.len() / idx.len();
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[r * w..(r + 1) * w];
                    for (d, &v) in dx.data_mut()[src * w..(src + 1) * w].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowScale(x, coeffs) => {
                let mut dx = g.clone();
                let w = dx.len() / coeffs.len();
                for (row, &c) in dx.data_mut().chunks_mut(w).zip(coeffs) {
                    row.iter_mut().for_each(|v| *v *= c);
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanKeep(x) => {
                let xs = self.shape(*x).to_vec();
                let inner = self.value(*x).len() / g.len();
                let inv = 1.0 / inner as f32;
                let mut data = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, inner));
                }
                self.acc(grads, *x, Tensor::new(xs, data)?);
            }
            Op::SumAll(x) => {
                self.acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), g.item()));
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let cols = v.len();
                let inner: f32 = g
                    .data()
                    .iter()
                    .zip(wv.data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32;
                let coef = inner / (sigma * sigma);
                let mut dw = g.map(|x| x / sigma);
                for (idx, d) in dw.data_mut().iter_mut().enumerate() {
                    *d -= coef * u[idx / cols] * v[idx % cols];
                }
                self.acc(grads, *w, dw);
            }
            Op::Sobel { x, gx, gy } => {
                let s = self.shape(*x);
                let dx = kernels::sobel_backward(gx, gy, node.value.data(), g.data(), s[0], s[2], s[3]);
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::BatchMeanFrame(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
                let mut sum = vec![0.0f64; c * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            let base = ((bi * c + ci) * t + ti) * hw;
                            for (m, &v) in sum[ci * hw..(ci + 1) * hw].iter_mut().zip(&g.data()[base..base + hw]) {
                                *m += v as f64;
                            }
                        }
                    }
                }
                let inv = 1.0 / (b * t) as f64;
                let share: Vec<f32> = sum.iter().map(|&v| (v * inv) as f32).collect();
                let mut data = Vec::with_capacity(g.len());
                for _ in 0..b {
                    for ci in 0..c {
                        for _ in 0..t {
                            data.extend_from_slice(&share[ci * hw..(ci + 1) * hw]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, data)?);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len() as f32;
                let scale = g.item() / n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, Tensor::new(vec![labels.len(), k], d)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = g.clone();
                for ((row, yr), n) in dx.data_mut().chunks_mut(d).zip(y.chunks(d)).zip(norms) {
                    let dot: f32 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (r, &yy) in row.iter_mut().zip(yr) {
                        *r = (*r - dot * yy) / n;
                    }
                }
                self.acc(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| (e / s) as f32));
    }
    out
}

/// `uᵀ W v` for a row-major `W` with `u.len()` rows.
pub(crate) fn sigma_uv(w: &[f32], u: &[f32], v: &[f32]) -> f32 {
    let cols = v.len();
    let mut acc = 0.0f64;
    for (r, &ur) in u.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let dot: f64 = row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
        acc += ur as f64 * dot;
    }
    acc as f32
}
