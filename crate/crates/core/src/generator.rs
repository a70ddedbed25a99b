//! Frame decoder: a dense projection to a 4×4 seed, UpPooling blocks that
//! double the resolution under conditional normalization, and a final
//! convolution to RGB with tanh.

use pathvid_nn::{Builder, CondBatchNorm, Conv, Dense, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentNoise, LatentPath, LatentPathNet, LATENT_DIM};
use crate::text::TEXT_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed_h: usize,
    pub seed_w: usize,
    /// Channels of the spatial seed (`c₁`).
    pub seed_channels: usize,
    pub block_count: usize,
    /// Output channels of each UpPooling block.
    pub channel_schedule: Vec<usize>,
    pub noise_dim: usize,
    /// Hidden width of the endpoint regressor.
    pub hidden: usize,
    /// Kernel extent of the final RGB convolution (3 = 3×3×3, 1 = 1×1×1).
    pub rgb_kernel: usize,
    /// Interpolate with `(T−i)/(T−1)` so the path starts at `z_start`.
    pub exact_endpoints: bool,
    /// Draw the concatenated path noise per frame instead of per video.
    pub per_frame_noise: bool,
    pub leaky_slope: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeneratorConfig {
    /// 64×64 output, `c₁ = 2048`, four blocks.
    pub fn full() -> Self {
        Self {
            seed_h: 4,
            seed_w: 4,
            seed_channels: 2048,
            block_count: 4,
            channel_schedule: vec![1024, 512, 256, 128],
            noise_dim: 32,
            hidden: 512,
            rgb_kernel: 3,
            exact_endpoints: false,
            per_frame_noise: false,
            leaky_slope: pathvid_nn::LEAKY_SLOPE,
        }
    }

    /// 32×32 output, `c₁ = 256`, three blocks.
    pub fn toy() -> Self {
        Self {
            seed_channels: 256,
            block_count: 3,
            channel_schedule: vec![128, 64, 32],
            ..Self::full()
        }
    }

    /// 32×32 output with narrow blocks, sized for single-core training.
    pub fn tiny() -> Self {
        Self {
            seed_channels: 64,
            block_count: 3,
            channel_schedule: vec![32, 16, 8],
            ..Self::full()
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.seed_h << self.block_count, self.seed_w << self.block_count)
    }

    pub fn cond_dim(&self) -> usize {
        TEXT_DIM + self.noise_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != self.block_count {
            return Err(Error::Config(format!(
                "generator channel_schedule has {} entries for {} blocks",
                self.channel_schedule.len(),
                self.block_count
            )));
        }
        if self.seed_h == 0 || self.seed_w == 0 || self.seed_channels == 0 || self.noise_dim == 0 {
            return Err(Error::Config("generator extents must be positive".into()));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("generator channel_schedule entries must be positive".into()));
        }
        if self.rgb_kernel != 1 && self.rgb_kernel != 3 {
            return Err(Error::Config(format!("generator rgb_kernel must be 1 or 3, got {}", self.rgb_kernel)));
        }
        Ok(())
    }
}

/// Doubles the resolution: `upsample → 1×1 conv` plus
/// `CBN → LeakyReLU → upsample → 3×3 conv → CBN → LeakyReLU → 3×3 conv`.
#[derive(Clone, Debug)]
pub struct UpPoolingBlock {
    pub short: Conv,
    pub cbn1: CondBatchNorm,
    pub conv1: Conv,
    pub cbn2: CondBatchNorm,
    pub conv2: Conv,
    pub slope: f32,
}

impl UpPoolingBlock {
    /// Output biases are only created when `bias` is set; a following
    /// normalization would cancel them.
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        c_in: usize,
        c_out: usize,
        cond: usize,
        slope: f32,
        bias: bool,
    ) -> Result<Self> {
        let out_conv = |b: &mut Builder<'_, R>, name: &str, c: usize, k: usize, p: usize| {
            if bias {
                b.conv2d(name, c, c_out, k, 1, p)
            } else {
                b.conv2d_bare(name, c, c_out, k, 1, p)
            }
        };
        Ok(Self {
            short: out_conv(b, "short", c_in, 1, 0)?,
            cbn1: b.cond_batch_norm("cbn1", c_in, cond)?,
            conv1: b.conv2d_bare("conv1", c_in, c_out, 3, 1, 1)?,
            cbn2: b.cond_batch_norm("cbn2", c_out, cond)?,
            conv2: out_conv(b, "conv2", c_out, 3, 1)?,
            slope,
        })
    }

    /// `x` is `[N, C_in, H, W]`, `cond` is `[N, d_c]`.
    pub fn forward(&self, s: &mut Session, x: Var, cond: Var) -> Result<Var> {
        // a 1×1 convolution commutes with nearest-neighbour upsampling
        let short = self.short.forward(s, x)?;
        let short = s.graph.upsample2x(short)?;
        let long = self.long_path(s, x, cond)?;
        Ok(s.graph.add(short, long)?)
    }

    pub fn long_path(&self, s: &mut Session, x: Var, cond: Var) -> Result<Var> {
        let h = self.cbn1.forward(s, x, cond)?;
        let h = s.graph.leaky_relu(h, self.slope);
        let h = s.graph.upsample2x(h)?;
        let h = self.conv1.forward(s, h)?;
        let h = self.cbn2.forward(s, h, cond)?;
        let h = s.graph.leaky_relu(h, self.slope);
        Ok(self.conv2.forward(s, h)?)
    }
}

/// Tape handles of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorPass {
    pub path: LatentPath,
    /// `[B·T, c₁, h₁, w₁]`.
    pub seed: Var,
    /// `[B, 3, T, H, W]`, values in `[−1, 1]`.
    pub video: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub latent: LatentPathNet,
    pub seed_fc: Dense,
    pub blocks: Vec<UpPoolingBlock>,
    pub rgb: Conv,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let latent = LatentPathNet::new(&mut b.scope("latent"), c.noise_dim, c.hidden, c.exact_endpoints, c.leaky_slope)?;
        let width = LATENT_DIM + c.noise_dim;
        let seed_fc = b.dense("seed_fc", width, c.seed_h * c.seed_w * c.seed_channels, false)?;
        let mut blocks = Vec::with_capacity(c.block_count);
        let mut c_in = c.seed_channels;
        for (i, &c_out) in c.channel_schedule.iter().enumerate() {
            blocks.push(UpPoolingBlock::new(
                &mut b.scope(&format!("block{i}")),
                c_in,
                c_out,
                c.cond_dim(),
                c.leaky_slope,
                i + 1 == c.block_count,
            )?);
            c_in = c_out;
        }
        let k = c.rgb_kernel;
        let rgb = b.conv3d("rgb", c_in, 3, [k; 3], [1; 3], [k / 2; 3])?;
        Ok(Self {
            config: c.clone(),
            latent,
            seed_fc,
            blocks,
            rgb,
        })
    }

    /// `[N, 288] → [N, c₁, h₁, w₁]`, channel-major.
    pub fn latent_to_spatial(&self, s: &mut Session, z: Var) -> Result<Var> {
        let n = s.graph.shape(z)[0];
        let c = &self.config;
        let h = self.seed_fc.forward(s, z)?;
        Ok(s.graph.reshape(h, vec![n, c.seed_channels, c.seed_h, c.seed_w])?)
    }

    /// Decodes `e(S)` (`[B, 256]`) into videos `[B, 3, T, H, W]`.
    pub fn forward(&self, s: &mut Session, e: Var, noise: &LatentNoise) -> Result<GeneratorPass> {
        let b = s.graph.shape(e)[0];
        let t = noise.frames;
        let path = self.latent.forward(s, e, noise)?;
        let seed = self.latent_to_spatial(s, path.conditioned)?;
        let repeat: Vec<usize> = (0..b).flat_map(|v| std::iter::repeat_n(v, t)).collect();
        let cond = s.graph.index_rows(path.condition, &repeat)?;
        let mut x = seed;
        for block in &self.blocks {
            x = block.forward(s, x, cond)?;
        }
        let shape = s.graph.shape(x).to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let x = s.graph.reshape(x, vec![b, t, c, h, w])?;
        let x = s.graph.permute(x, &[0, 2, 1, 3, 4])?;
        let x = self.rgb.forward(s, x)?;
        let video = s.graph.tanh(x);
        Ok(GeneratorPass { path, seed, video })
    }
}

/// A `T×3×H×W` clip in `[−1, 1]` with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub caption: String,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    /// Splits a `[B, 3, T, H, W]` batch into clips.
    pub fn from_batch(videos: &Tensor, captions: &[String]) -> Result<Vec<VideoClip>> {
        let sh = videos.shape();
        if sh.len() != 5 || sh[1] != 3 || sh[0] != captions.len() {
            return Err(Error::Contract(format!(
                "expected [{}, 3, T, H, W] videos, got {:?}",
                captions.len(),
                sh
            )));
        }
        let frames = videos.permute(&[0, 2, 1, 3, 4])?;
        let per = frames.len() / sh[0];
        Ok(captions
            .iter()
            .enumerate()
            .map(|(i, c)| VideoClip {
                frames: Tensor::new(vec![sh[2], 3, sh[3], sh[4]], frames.data()[i * per..(i + 1) * per].to_vec())
                    .expect("slice matches shape"),
                caption: c.clone(),
            })
            .collect())
    }

    /// Stacks clips of equal shape into `[B, 3, T, H, W]`.
    pub fn to_batch(clips: &[&Tensor]) -> Result<Tensor> {
        let stacked = Tensor::stack(&clips.iter().map(|c| (*c).clone()).collect::<Vec<_>>())?;
        Ok(stacked.permute(&[0, 2, 1, 3, 4])?)
    }
}
