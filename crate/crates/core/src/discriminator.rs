//! Three-head discriminator over enriched videos: a per-video 3D head, a
//! per-frame 2D head and a sentence-independent per-region head.

use pathvid_nn::{Builder, Conv, Dense, LayerConfig, LayerKind, ParamStore, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TEXT_DIM;

/// RGB + batch-average RGB + Sobel luminance edge.
pub const ENRICHED_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Input height and width.
    pub resolution: usize,
    /// First-block channels of the per-frame encoder, doubled per block.
    pub base_channels: usize,
    /// First-block channels of the per-video encoder, doubled per block.
    pub base_channels_3d: usize,
    /// `d_v`.
    pub feature_dim: usize,
    pub leaky_slope: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            base_channels: 64,
            base_channels_3d: 64,
            feature_dim: 512,
            leaky_slope: pathvid_nn::LEAKY_SLOPE,
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            base_channels_3d: 8,
            feature_dim: 64,
            ..Self::default()
        }
    }

    /// Number of halvings from the input down to 4×4.
    pub fn block_count(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution must be a power of two ≥ 8, got {r}")));
        }
        Ok(r.trailing_zeros() as usize - 2)
    }

    /// Channels of the final 4×4 per-frame map.
    pub fn region_channels(&self) -> Result<usize> {
        Ok(self.base_channels << (self.block_count()? - 1))
    }
}

/// Halves the spatial extent: `conv1×1 → pool` plus
/// `conv3×3 → pool → LeakyReLU → conv1×1`. 3D blocks pool space only.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub short: Conv,
    pub conv3: Conv,
    pub conv1: Conv,
    pub slope: f32,
}

impl DownBlock {
    pub fn new_2d<R: Rng + ?Sized>(b: &mut Builder<'_, R>, c_in: usize, c_out: usize, slope: f32) -> Result<Self> {
        Ok(Self {
            short: b.conv2d("short", c_in, c_out, 1, 1, 0)?,
            conv3: b.conv2d("conv3", c_in, c_out, 3, 1, 1)?,
            conv1: b.conv2d("conv1", c_out, c_out, 1, 1, 0)?,
            slope,
        })
    }

    pub fn new_3d<R: Rng + ?Sized>(b: &mut Builder<'_, R>, c_in: usize, c_out: usize, slope: f32) -> Result<Self> {
        Ok(Self {
            short: b.conv3d("short", c_in, c_out, [1; 3], [1; 3], [0; 3])?,
            conv3: b.conv3d("conv3", c_in, c_out, [3; 3], [1; 3], [1; 3])?,
            conv1: b.conv3d("conv1", c_out, c_out, [1; 3], [1; 3], [0; 3])?,
            slope,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let short = self.short.forward(s, x)?;
        let short = s.graph.avg_pool2x(short)?;
        let long = self.conv3.forward(s, x)?;
        let long = s.graph.avg_pool2x(long)?;
        let long = s.graph.leaky_relu(long, self.slope);
        let long = self.conv1.forward(s, long)?;
        Ok(s.graph.add(short, long)?)
    }

    pub fn layers(&self, store: &ParamStore) -> Vec<LayerConfig> {
        let c = self.conv3.config(store).out_channels;
        vec![
            self.short.config(store),
            self.conv3.config(store),
            LayerConfig::simple(LayerKind::AvgPool, c),
            LayerConfig::simple(LayerKind::LeakyRelu, c),
            self.conv1.config(store),
        ]
    }
}

/// Stacked down blocks ending in LeakyReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<DownBlock>,
    pub slope: f32,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        c_in: usize,
        base: usize,
        count: usize,
        three_d: bool,
        slope: f32,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(count);
        let mut c = c_in;
        for i in 0..count {
            let out = base << i;
            let mut sb = b.scope(&format!("block{i}"));
            blocks.push(if three_d {
                DownBlock::new_3d(&mut sb, c, out, slope)?
            } else {
                DownBlock::new_2d(&mut sb, c, out, slope)?
            });
            c = out;
        }
        Ok(Self { blocks, slope })
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(s.graph.leaky_relu(x, self.slope))
    }
}

/// `W_D · (sigmoid(W_e · e(S)) ⊙ v)`.
#[derive(Clone, Debug)]
pub struct ConditionalHead {
    pub w_e: Dense,
    pub w_d: Dense,
}

impl ConditionalHead {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, d_v: usize) -> Result<Self> {
        Ok(Self {
            w_e: b.dense("w_e", TEXT_DIM, d_v, false)?,
            w_d: b.dense("w_d", d_v, 1, false)?,
        })
    }

    /// `v` is `[N, d_v]`, `e` is `[N, 256]`; returns `[N, 1]`.
    pub fn score(&self, s: &mut Session, v: Var, e: Var) -> Result<Var> {
        let gate = self.w_e.forward(s, e)?;
        let gate = s.graph.sigmoid(gate);
        let gated = s.graph.mul(gate, v)?;
        Ok(self.w_d.forward(s, gated)?)
    }
}

/// Per-sample scores, each `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreTriple {
    pub d3d: Var,
    pub d2d: Var,
    pub dr: Var,
}

/// Intermediate handles of one scoring pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorPass {
    pub enriched: Var,
    /// `[B·T, d_v]`.
    pub frame_vectors: Var,
    /// `[B·T, C_r, 4, 4]`.
    pub regions: Var,
    /// `[B, d_v]`.
    pub video_vectors: Var,
    /// `[B·T·16]` per-region scores in frame-major order.
    pub region_scores: Var,
    pub scores: ScoreTriple,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub enc2d: Encoder,
    pub fc2d: Dense,
    pub enc3d: Encoder,
    pub fc3d: Dense,
    pub head2d: ConditionalHead,
    pub head3d: ConditionalHead,
    pub region: Conv,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, config: &DiscriminatorConfig) -> Result<Self> {
        let n = config.block_count()?;
        let c = config;
        let c2 = c.base_channels << (n - 1);
        let c3 = c.base_channels_3d << (n - 1);
        Ok(Self {
            config: c.clone(),
            enc2d: Encoder::new(&mut b.scope("enc2d"), ENRICHED_CHANNELS, c.base_channels, n, false, c.leaky_slope)?,
            fc2d: b.dense("fc2d", c2, c.feature_dim, true)?,
            enc3d: Encoder::new(&mut b.scope("enc3d"), ENRICHED_CHANNELS, c.base_channels_3d, n, true, c.leaky_slope)?,
            fc3d: b.dense("fc3d", c3, c.feature_dim, true)?,
            head2d: ConditionalHead::new(&mut b.scope("head2d"), c.feature_dim)?,
            head3d: ConditionalHead::new(&mut b.scope("head3d"), c.feature_dim)?,
            region: b.conv2d("region", c2, 1, 1, 1, 0)?,
        })
    }

    /// Every layer in the network, for structural checks.
    pub fn layers(&self, store: &ParamStore) -> Vec<LayerConfig> {
        let mut out = Vec::new();
        for enc in [&self.enc2d, &self.enc3d] {
            for b in &enc.blocks {
                out.extend(b.layers(store));
            }
        }
        for d in [&self.fc2d, &self.fc3d, &self.head2d.w_e, &self.head2d.w_d, &self.head3d.w_e, &self.head3d.w_d] {
            out.push(d.config());
        }
        out.push(LayerConfig::simple(LayerKind::Sigmoid, self.config.feature_dim));
        out.push(self.region.config(store));
        out
    }

    /// Per-frame vectors `[B·T, d_v]` and region maps `[B·T, C_r, 4, 4]`.
    pub fn encode_2d(&self, s: &mut Session, enriched: Var) -> Result<(Var, Var)> {
        let sh = s.graph.shape(enriched).to_vec();
        let (b, c, t, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        let frames = s.graph.permute(enriched, &[0, 2, 1, 3, 4])?;
        let frames = s.graph.reshape(frames, vec![b * t, c, h, w])?;
        let regions = self.enc2d.forward(s, frames)?;
        let pooled = s.graph.mean_keep(regions, 2)?;
        Ok((self.fc2d.forward(s, pooled)?, regions))
    }

    /// Per-video vectors `[B, d_v]`.
    pub fn encode_3d(&self, s: &mut Session, enriched: Var) -> Result<Var> {
        let t = s.graph.shape(enriched)[2];
        if t < 2 {
            return Err(Error::Contract(format!("3D encoder needs at least 2 frames, got {t}")));
        }
        let x = self.enc3d.forward(s, enriched)?;
        let pooled = s.graph.mean_keep(x, 2)?;
        Ok(self.fc3d.forward(s, pooled)?)
    }

    /// `[B·T, C_r, 4, 4] → ([B·T·16] region scores, [B] means)`.
    pub fn region_scores(&self, s: &mut Session, regions: Var, b: usize) -> Result<(Var, Var)> {
        let r = self.region.forward(s, regions)?;
        let n = s.graph.value(r).len();
        let flat = s.graph.reshape(r, vec![n])?;
        let per_video = s.graph.reshape(r, vec![b, n / b])?;
        Ok((flat, s.graph.mean_keep(per_video, 1)?))
    }

    /// Scores videos `[B, 3, T, H, W]` against sentence codes `[B, 256]`.
    pub fn forward(&self, s: &mut Session, videos: Var, e: Var) -> Result<DiscriminatorPass> {
        let sh = s.graph.shape(videos).to_vec();
        if sh.len() != 5 || sh[1] != 3 {
            return Err(Error::Contract(format!("discriminator expects [B, 3, T, H, W], got {sh:?}")));
        }
        let (b, t) = (sh[0], sh[2]);
        if s.graph.shape(e) != [b, TEXT_DIM] {
            return Err(Error::Contract(format!(
                "{b} videos paired with sentence codes {:?}",
                s.graph.shape(e)
            )));
        }
        let enriched = enrich(s, videos)?;
        let (frame_vectors, regions) = self.encode_2d(s, enriched)?;
        let video_vectors = self.encode_3d(s, enriched)?;

        let d3d = self.head3d.score(s, video_vectors, e)?;
        let d3d = s.graph.reshape(d3d, vec![b])?;

        let repeat: Vec<usize> = (0..b).flat_map(|v| std::iter::repeat_n(v, t)).collect();
        let e_frames = s.graph.index_rows(e, &repeat)?;
        let per_frame = self.head2d.score(s, frame_vectors, e_frames)?;
        let per_frame = s.graph.reshape(per_frame, vec![b, t])?;
        let d2d = s.graph.mean_keep(per_frame, 1)?;

        let (region_scores, dr) = self.region_scores(s, regions, b)?;
        Ok(DiscriminatorPass {
            enriched,
            frame_vectors,
            regions,
            video_vectors,
            region_scores,
            scores: ScoreTriple { d3d, d2d, dr },
        })
    }
}

/// Appends the batch-average frame and per-frame Sobel magnitude:
/// `[B, 3, T, H, W] → [B, 7, T, H, W]`.
pub fn enrich(s: &mut Session, videos: Var) -> Result<Var> {
    let sh = s.graph.shape(videos).to_vec();
    let (b, t, h, w) = (sh[0], sh[2], sh[3], sh[4]);
    let avg = s.graph.batch_mean_frame(videos)?;
    let frames = s.graph.permute(videos, &[0, 2, 1, 3, 4])?;
    let frames = s.graph.reshape(frames, vec![b * t, 3, h, w])?;
    let edges = s.graph.sobel(frames)?;
    let edges = s.graph.reshape(edges, vec![b, t, 1, h, w])?;
    let edges = s.graph.permute(edges, &[0, 2, 1, 3, 4])?;
    Ok(s.graph.concat(&[videos, avg, edges], 1)?)
}
