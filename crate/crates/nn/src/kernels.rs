//! Raw forward/backward kernels over flat buffers. Shapes are validated by
//! the graph layer before anything here runs.

use crate::tensor::gemm;

/// Geometry of a 3D cross-correlation; 2D convolutions use depth 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        n: usize,
        c: usize,
        o: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * pad[i];
            if stride[i] == 0 || padded < kernel[i] {
                return None;
            }
            output[i] = (padded - kernel[i]) / stride[i] + 1;
        }
        Some(Self {
            n,
            c,
            o,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }
    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    pub fn output_len(&self) -> usize {
        self.n * self.o * self.out_volume()
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + k − pad`
/// lies inside `[0, n)`.
fn valid_span(out: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi) = valid_span(ow, iw, kx, sw, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let q = (oz * oh + oy) * ow;
                            let d = &mut dst[q..q + ow];
                            if !(iz >= 0 && iz < id as isize && iy >= 0 && iy < ih as isize) {
                                d.fill(0.0);
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            d[..lo].fill(0.0);
                            d[hi..].fill(0.0);
                            let start = base + lo * sw + kx - pw;
                            if sw == 1 {
                                d[lo..hi].copy_from_slice(&xc[start..start + hi - lo]);
                            } else {
                                for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                    *v = xc[start + j * sw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.c {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi) = valid_span(ow, iw, kx, sw, pw);
                    let src = &col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if !(iz >= 0 && iz < id as isize && iy >= 0 && iy < ih as isize) {
                                continue;
                            }
                            let q = (oz * oh + oy) * ow;
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let start = base + lo * sw + kx - pw;
                            let s = &src[q + lo..q + hi];
                            if sw == 1 {
                                for (d, v) in dxc[start..start + hi - lo].iter_mut().zip(s) {
                                    *d += v;
                                }
                            } else {
                                for (j, v) in s.iter().enumerate() {
                                    dxc[start + j * sw] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let k = g.k();
    let p = g.out_volume();
    let xin = g.c * g.in_volume();
    let mut out = vec![0.0f32; g.output_len()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; k * p]
    };
    for s in 0..g.n {
        let xs = &x[s * xin..(s + 1) * xin];
        let ys = &mut out[s * g.o * p..(s + 1) * g.o * p];
        let cols: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        gemm(g.o, k, p, w, false, cols, false, ys, false);
        if let Some(b) = bias {
            for (o, row) in ys.chunks_mut(p).enumerate() {
                let bo = b[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

/// Returns (dx, dw, db); each is computed only when requested.
pub fn conv_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let k = g.k();
    let p = g.out_volume();
    let xin = g.c * g.in_volume();
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0f32; w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; g.o];
        for s in 0..g.n {
            let ys = &dy[s * g.o * p..(s + 1) * g.o * p];
            for (o, row) in ys.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f32>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; k * p] };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![0.0f32; k * p]
    };
    for s in 0..g.n {
        let dys = &dy[s * g.o * p..(s + 1) * g.o * p];
        let xs = &x[s * xin..(s + 1) * xin];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f32] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(g.o, p, k, dys, false, cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * xin..(s + 1) * xin];
            if pointwise {
                gemm(k, g.o, p, w, true, dys, false, dxs, true);
            } else {
                gemm(k, g.o, p, w, true, dys, false, &mut dcol, false);
                col2im(g, &dcol, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbour 2x upsampling over the two trailing axes.
pub fn upsample2x(x: &[f32], outer: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * 4 * h * w];
    for o in 0..outer {
        let src = &x[o * h * w..(o + 1) * h * w];
        let dst = &mut out[o * 4 * h * w..(o + 1) * 4 * h * w];
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f32], outer: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; outer * h * w];
    for o in 0..outer {
        let src = &dy[o * 4 * h * w..(o + 1) * 4 * h * w];
        let dst = &mut dx[o * h * w..(o + 1) * h * w];
        for y in 0..2 * h {
            for x2 in 0..2 * w {
                dst[(y / 2) * w + x2 / 2] += src[y * 2 * w + x2];
            }
        }
    }
    dx
}

/// Non-overlapping 2x2 mean over the two trailing axes (`h`, `w` even).
pub fn avg_pool2x(x: &[f32], outer: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; outer * ho * wo];
    for o in 0..outer {
        let src = &x[o * h * w..(o + 1) * h * w];
        let dst = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * wo + xx] = 0.25 * (a + b + c + d);
            }
        }
    }
    out
}

pub fn avg_pool2x_backward(dy: &[f32], outer: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; outer * h * w];
    for o in 0..outer {
        let src = &dy[o * ho * wo..(o + 1) * ho * wo];
        let dst = &mut dx[o * h * w..(o + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
pub const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Luminance Sobel responses for `n` RGB images: returns (gx, gy, magnitude).
pub fn sobel(x: &[f32], n: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let mut gx = vec![0.0f32; n * hw];
    let mut gy = vec![0.0f32; n * hw];
    let mut lum = vec![0.0f32; hw];
    for s in 0..n {
        let img = &x[s * 3 * hw..(s + 1) * 3 * hw];
        for i in 0..hw {
            lum[i] = LUMA[0] * img[i] + LUMA[1] * img[hw + i] + LUMA[2] * img[2 * hw + i];
        }
        for y in 0..h {
            for xx in 0..w {
                // written as differences so that flat regions give exactly 0
                let ys = [clamp_idx(y as isize - 1, h), y, clamp_idx(y as isize + 1, h)];
                let xs = [clamp_idx(xx as isize - 1, w), xx, clamp_idx(xx as isize + 1, w)];
                let p = |r: usize, c: usize| lum[ys[r] * w + xs[c]];
                let sx = (p(0, 2) - p(0, 0)) + 2.0 * (p(1, 2) - p(1, 0)) + (p(2, 2) - p(2, 0));
                let sy = (p(2, 0) - p(0, 0)) + 2.0 * (p(2, 1) - p(0, 1)) + (p(2, 2) - p(0, 2));
                gx[s * hw + y * w + xx] = sx;
                gy[s * hw + y * w + xx] = sy;
            }
        }
    }
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    (gx, gy, mag)
}

pub fn sobel_backward(
    gx: &[f32],
    gy: &[f32],
    mag: &[f32],
    dmag: &[f32],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut dx = vec![0.0f32; n * 3 * hw];
    let mut dlum = vec![0.0f32; hw];
    for s in 0..n {
        dlum.fill(0.0);
        for y in 0..h {
            for xx in 0..w {
                let i = s * hw + y * w + xx;
                if mag[i] <= 0.0 {
                    continue;
                }
                let dgx = dmag[i] * gx[i] / mag[i];
                let dgy = dmag[i] * gy[i] / mag[i];
                for dy in 0..3 {
                    let yy = clamp_idx(y as isize + dy as isize - 1, h);
                    for dxk in 0..3 {
                        let xq = clamp_idx(xx as isize + dxk as isize - 1, w);
                        dlum[yy * w + xq] += SOBEL_X[dy][dxk] * dgx + SOBEL_Y[dy][dxk] * dgy;
                    }
                }
            }
        }
        let img = &mut dx[s * 3 * hw..(s + 1) * 3 * hw];
        for (ch, &l) in LUMA.iter().enumerate() {
            for i in 0..hw {
                img[ch * hw + i] = l * dlum[i];
            }
        }
    }
    dx
}

/// Per-channel mean and population variance of `x` viewed as `[outer, c, inner]`.
pub fn channel_stats(x: &[f32], outer: usize, c: usize, inner: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (outer * inner) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            s += x[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            ss += x[base..base + inner]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (ss / m) as f32;
    }
    (mean, var)
}
