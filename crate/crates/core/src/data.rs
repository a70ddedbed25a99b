//! Procedural "moving shapes" clips with templated captions, stored as NTA
//! archives, plus batch sampling.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use pathvid_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::DataConfig;
use crate::error::{Error, IoContext, Result};
use crate::generator::VideoClip;
use crate::nta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    MovingLeft,
    MovingRight,
    MovingUp,
    MovingDown,
    Growing,
    Shrinking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    White,
    Gray,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::MovingLeft,
        Motion::MovingRight,
        Motion::MovingUp,
        Motion::MovingDown,
        Motion::Growing,
        Motion::Shrinking,
    ];
    pub fn words(self) -> &'static str {
        match self {
            Motion::MovingLeft => "moving left",
            Motion::MovingRight => "moving right",
            Motion::MovingUp => "moving up",
            Motion::MovingDown => "moving down",
            Motion::Growing => "growing",
            Motion::Shrinking => "shrinking",
        }
    }
    /// Unit displacement per frame in image coordinates (y down).
    fn direction(self) -> (f32, f32) {
        match self {
            Motion::MovingLeft => (-1.0, 0.0),
            Motion::MovingRight => (1.0, 0.0),
            Motion::MovingUp => (0.0, -1.0),
            Motion::MovingDown => (0.0, 1.0),
            Motion::Growing | Motion::Shrinking => (0.0, 0.0),
        }
    }
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Black, Background::White, Background::Gray];
    pub fn word(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::White => "white",
            Background::Gray => "gray",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Black => [0.0; 3],
            Background::White => [1.0; 3],
            Background::Gray => [0.5; 3],
        }
    }
}

/// One class of the dataset: a unique caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub color: Color,
    pub shape: Shape,
    pub motion: Motion,
}

impl ClassSpec {
    pub const fn new(color: Color, shape: Shape, motion: Motion) -> Self {
        Self { color, shape, motion }
    }

    pub fn caption(&self) -> String {
        caption(self.color, self.shape, self.motion, Background::Black)
    }
}

/// Class list; configs take the first `num_classes` entries.
pub const CANONICAL_CLASSES: [ClassSpec; 11] = [
    ClassSpec::new(Color::Red, Shape::Circle, Motion::MovingLeft),
    ClassSpec::new(Color::Green, Shape::Square, Motion::MovingRight),
    ClassSpec::new(Color::Blue, Shape::Triangle, Motion::MovingDown),
    ClassSpec::new(Color::Yellow, Shape::Circle, Motion::MovingUp),
    ClassSpec::new(Color::Red, Shape::Square, Motion::Growing),
    ClassSpec::new(Color::Green, Shape::Triangle, Motion::Shrinking),
    ClassSpec::new(Color::Blue, Shape::Circle, Motion::MovingRight),
    ClassSpec::new(Color::Yellow, Shape::Square, Motion::MovingLeft),
    ClassSpec::new(Color::Red, Shape::Triangle, Motion::MovingUp),
    ClassSpec::new(Color::Green, Shape::Circle, Motion::Growing),
    ClassSpec::new(Color::Blue, Shape::Square, Motion::MovingDown),
];

/// `"the <color> <shape> is <motion>"`, with `" on a <bg> background"`
/// unless the background is black.
pub fn caption(color: Color, shape: Shape, motion: Motion, bg: Background) -> String {
    let mut s = format!("the {} {} is {}", color.word(), shape.word(), motion.words());
    if bg != Background::Black {
        s.push_str(&format!(" on a {} background", bg.word()));
    }
    s
}

/// Every word the caption grammar can produce.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ["the", "is", "on", "a", "background", "moving"].iter().map(|s| s.to_string()).collect();
    v.extend(Color::ALL.iter().map(|c| c.word().to_string()));
    v.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
    for m in Motion::ALL {
        v.extend(m.words().split(' ').map(str::to_string));
    }
    v.extend(Background::ALL.iter().map(|b| b.word().to_string()));
    v.sort();
    v.dedup();
    v
}

/// Geometry of one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub background: Background,
    /// Centre of the shape in pixels at frame 0.
    pub start: (f32, f32),
    /// Radius (circle), half side (square) or circumradius (triangle).
    pub size: f32,
    /// Pixels per frame for translations, size change per frame otherwise.
    pub speed: f32,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        caption(self.color, self.shape, self.motion, self.background)
    }

    /// Centre and size at frame `i`.
    pub fn at(&self, i: usize) -> ((f32, f32), f32) {
        let f = i as f32;
        let (dx, dy) = self.motion.direction();
        let size = match self.motion {
            Motion::Growing => self.size + self.speed * f,
            Motion::Shrinking => self.size - self.speed * f,
            _ => self.size,
        };
        ((self.start.0 + dx * self.speed * f, self.start.1 + dy * self.speed * f), size)
    }

    /// Whether the shape stays inside a `res×res` frame with a 1-pixel
    /// margin for all `t` frames.
    pub fn check(&self, t: usize, res: usize) -> Result<()> {
        let r = res as f32;
        for i in 0..t {
            let ((x, y), s) = self.at(i);
            if s < 1.0 {
                return Err(Error::Data(format!("{}: size {s:.2} at frame {i} is too small", self.caption())));
            }
            if x - s < 1.0 || y - s < 1.0 || x + s > r - 1.0 || y + s > r - 1.0 {
                return Err(Error::Data(format!(
                    "{}: shape leaves the {res}×{res} frame at frame {i}",
                    self.caption()
                )));
            }
        }
        Ok(())
    }

    /// A randomized scene for `class`, valid for `t` frames.
    pub fn random<R: Rng + ?Sized>(class: &ClassSpec, t: usize, cfg: &DataConfig, rng: &mut R) -> Result<Self> {
        let r = cfg.resolution as f32;
        let jit = |rng: &mut R, lo: f32, hi: f32| if cfg.jitter { rng.random_range(lo..=hi) } else { (lo + hi) / 2.0 };
        let travel = (t.saturating_sub(1)) as f32;
        let (size, speed) = match class.motion {
            Motion::Growing => {
                let rate = cfg.step_size * 0.2 * jit(rng, 0.9, 1.1);
                (r * 0.1 * jit(rng, 0.9, 1.1), rate)
            }
            Motion::Shrinking => {
                let rate = cfg.step_size * 0.2 * jit(rng, 0.9, 1.1);
                (r * 0.1 * jit(rng, 0.9, 1.1) + rate * travel, rate)
            }
            _ => (r * 0.15 * jit(rng, 0.85, 1.15), cfg.step_size * jit(rng, 0.8, 1.2)),
        };
        let max_size = match class.motion {
            Motion::Growing => size + speed * travel,
            _ => size,
        };
        let (dx, dy) = class.motion.direction();
        let lo = max_size + 1.0;
        let hi = r - 1.0 - max_size;
        let axis = |rng: &mut R, d: f32| -> Result<f32> {
            let span = d.abs() * speed * travel;
            let (a, b) = if d < 0.0 { (lo + span, hi) } else { (lo, hi - span) };
            if a > b {
                return Err(Error::Data(format!("{}: motion exits the frame over {t} frames", class.caption())));
            }
            Ok(if cfg.jitter { rng.random_range(a..=b) } else { (a + b) / 2.0 })
        };
        let x = axis(rng, dx)?;
        let y = axis(rng, dy)?;
        let spec = SceneSpec {
            shape: class.shape,
            color: class.color,
            motion: class.motion,
            background: Background::Black,
            start: (x, y),
            size,
            speed,
        };
        spec.check(t, cfg.resolution)?;
        Ok(spec)
    }
}

fn inside(shape: Shape, px: f32, py: f32, cx: f32, cy: f32, s: f32) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= s * s,
        Shape::Square => dx.abs() <= s && dy.abs() <= s,
        Shape::Triangle => {
            // apex up; vertices at angles −90°, 30°, 150° on the circumcircle
            let v = [(0.0, -s), (s * 0.866_025_4, s * 0.5), (-s * 0.866_025_4, s * 0.5)];
            let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
            let e0 = edge(v[0], v[1]);
            let e1 = edge(v[1], v[2]);
            let e2 = edge(v[2], v[0]);
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 4;

/// Renders `t` frames as `[T, 3, res, res]` in `[−1, 1]`; each pixel blends
/// shape and background by its 4×4 sub-sample coverage.
pub fn synthesize_clip(spec: &SceneSpec, t: usize, res: usize) -> Result<Tensor> {
    spec.check(t, res)?;
    let fg = spec.color.rgb();
    let bg = spec.background.rgb();
    let hw = res * res;
    let mut data = vec![0.0f32; t * 3 * hw];
    let n = SUPERSAMPLE as f32;
    for i in 0..t {
        let ((cx, cy), s) = spec.at(i);
        let frame = &mut data[i * 3 * hw..(i + 1) * 3 * hw];
        for y in 0..res {
            for x in 0..res {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) / n;
                        let py = y as f32 + (sy as f32 + 0.5) / n;
                        hits += inside(spec.shape, px, py, cx, cy, s) as usize;
                    }
                }
                let cov = hits as f32 / (n * n);
                for c in 0..3 {
                    let v = if hits == 0 { bg[c] } else { bg[c] + cov * (fg[c] - bg[c]) };
                    frame[c * hw + y * res + x] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Ok(Tensor::new(vec![t, 3, res, res], data)?)
}

/// Per-frame shape mask: pixels at least half way from the background colour
/// towards the shape colour.
pub fn shape_mask(frames: &Tensor, bg: Background, fg: Color) -> Vec<Vec<bool>> {
    let sh = frames.shape();
    let (t, hw) = (sh[0], sh[2] * sh[3]);
    let bgv = bg.rgb().map(|v| 2.0 * v - 1.0);
    let fgv = fg.rgb().map(|v| 2.0 * v - 1.0);
    let full: f32 = (0..3).map(|c| (fgv[c] - bgv[c]).abs()).sum();
    (0..t)
        .map(|i| {
            (0..hw)
                .map(|p| {
                    let d: f32 = (0..3).map(|c| (frames.data()[(i * 3 + c) * hw + p] - bgv[c]).abs()).sum();
                    d >= 0.5 * full
                })
                .collect()
        })
        .collect()
}

/// Centre of mass `(x, y)` of each frame's shape mask.
pub fn centroids(frames: &Tensor, bg: Background, fg: Color) -> Vec<(f32, f32)> {
    let w = frames.shape()[3];
    shape_mask(frames, bg, fg)
        .iter()
        .map(|m| {
            let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
            for (p, &on) in m.iter().enumerate() {
                if on {
                    sx += (p % w) as f64 + 0.5;
                    sy += (p / w) as f64 + 0.5;
                    n += 1.0;
                }
            }
            ((sx / n.max(1.0)) as f32, (sy / n.max(1.0)) as f32)
        })
        .collect()
}

/// Whether the measured trajectory agrees with `motion`: the tracked
/// quantity never moves against the motion and changes overall. Size is
/// measured as soft coverage so sub-pixel growth is visible.
pub fn motion_matches(frames: &Tensor, bg: Background, fg: Color, motion: Motion) -> bool {
    let monotone = |v: &[f32], up: bool| {
        let steady = v.windows(2).all(|w| if up { w[1] >= w[0] } else { w[1] <= w[0] });
        let net = v[v.len() - 1] - v[0];
        steady && if up { net > 0.0 } else { net < 0.0 }
    };
    if frames.shape()[0] < 2 {
        return false;
    }
    match motion {
        Motion::Growing | Motion::Shrinking => {
            let areas = coverage(frames, bg, fg);
            monotone(&areas, motion == Motion::Growing)
        }
        _ => {
            let c = centroids(frames, bg, fg);
            let xs: Vec<f32> = c.iter().map(|p| p.0).collect();
            let ys: Vec<f32> = c.iter().map(|p| p.1).collect();
            match motion {
                Motion::MovingLeft => monotone(&xs, false),
                Motion::MovingRight => monotone(&xs, true),
                Motion::MovingUp => monotone(&ys, false),
                _ => monotone(&ys, true),
            }
        }
    }
}

/// Per-frame sum of each pixel's fractional distance from the background
/// towards the shape colour.
pub fn coverage(frames: &Tensor, bg: Background, fg: Color) -> Vec<f32> {
    let sh = frames.shape();
    let (t, hw) = (sh[0], sh[2] * sh[3]);
    let bgv = bg.rgb().map(|v| 2.0 * v - 1.0);
    let fgv = fg.rgb().map(|v| 2.0 * v - 1.0);
    let full: f32 = (0..3).map(|c| (fgv[c] - bgv[c]).abs()).sum();
    (0..t)
        .map(|i| {
            (0..hw)
                .map(|p| (0..3).map(|c| (frames.data()[(i * 3 + c) * hw + p] - bgv[c]).abs()).sum::<f32>() / full)
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub caption: String,
    pub class: usize,
    pub frame_count: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub step_size: f32,
    pub seed: u64,
    pub classes: Vec<String>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for e in &self.clips {
            c[e.class] += 1;
        }
        c
    }
}

/// Saves one clip as an NTA archive with its caption in the metadata.
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    nta::write(dir, 0, "", &[("frames", &clip.frames)], json!({ "caption": clip.caption }))
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let a = nta::read(dir)?;
    let frames = a
        .get("frames")
        .cloned()
        .ok_or_else(|| Error::Integrity { name: "frames".into(), detail: format!("missing in {}", dir.display()) })?;
    if frames.rank() != 4 || frames.shape()[1] != 3 {
        return Err(Error::Integrity {
            name: "frames".into(),
            detail: format!("shape {:?} is not [T, 3, H, W]", frames.shape()),
        });
    }
    let caption = a.meta.get("caption").and_then(|c| c.as_str()).unwrap_or_default().to_string();
    Ok(VideoClip { frames, caption })
}

/// Writes each frame as `<dir>/frame_<i>.png`, `i` zero-padded to 4 digits.
pub fn export_png(frames: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let sh = frames.shape();
    let (t, h, w) = (sh[0], sh[2], sh[3]);
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = frames.data()[((i * 3 + c) * h + y as usize) * w + x as usize];
                (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("frame_{i:04}.png"));
        img.save(&path)?;
        out.push(path);
    }
    Ok(out)
}

/// Reads PNG frames back into `[T, 3, H, W]` in `[−1, 1]`.
pub fn import_png(paths: &[PathBuf]) -> Result<Tensor> {
    let mut frames = Vec::new();
    let (mut h, mut w) = (0, 0);
    for p in paths {
        let img = image::open(p)?.to_rgb8();
        (w, h) = (img.width() as usize, img.height() as usize);
        let mut f = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                f[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
        frames.extend(f);
    }
    Ok(Tensor::new(vec![paths.len(), 3, h, w], frames)?)
}

/// An in-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `[T, 3, H, W]` per clip.
    pub clips: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.clips.iter().map(|c| c.class).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Synthesizes the dataset in memory; clip `i` uses its own stream
    /// split from the master seed.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes == 0 || cfg.num_classes > CANONICAL_CLASSES.len() {
            return Err(Error::Config(format!("data.num_classes must be in 1..={}", CANONICAL_CLASSES.len())));
        }
        let classes = &CANONICAL_CLASSES[..cfg.num_classes];
        let mut entries = Vec::new();
        let mut clips = Vec::new();
        for (k, class) in classes.iter().enumerate() {
            for j in 0..cfg.clips_per_class {
                let index = k * cfg.clips_per_class + j;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64 + 1);
                let spec = SceneSpec::random(class, cfg.frames, cfg, &mut rng)?;
                let id = format!("clip_{index:05}");
                clips.push(synthesize_clip(&spec, cfg.frames, cfg.resolution)?);
                entries.push(ClipEntry {
                    file: format!("clips/{id}"),
                    id,
                    caption: class.caption(),
                    class: k,
                    frame_count: cfg.frames,
                });
            }
        }
        Ok(Self {
            manifest: DatasetManifest {
                resolution: cfg.resolution,
                step_size: cfg.step_size,
                seed,
                classes: classes.iter().map(ClassSpec::caption).collect(),
                clips: entries,
            },
            clips,
        })
    }

    /// Writes `manifest.json` and one archive per clip under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        for (e, frames) in self.manifest.clips.iter().zip(&self.clips) {
            save_clip(
                &VideoClip {
                    frames: frames.clone(),
                    caption: e.caption.clone(),
                },
                &dir.join(&e.file),
            )?;
        }
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(dir.join("manifest.json"), text).ctx(|| format!("writing {}/manifest.json", dir.display()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut ids = std::collections::HashSet::new();
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for e in &manifest.clips {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate clip id {}", e.id)));
            }
            if e.class >= manifest.classes.len() {
                return Err(Error::Data(format!("clip {} has class {} out of range", e.id, e.class)));
            }
            let clip = load_clip(&dir.join(&e.file))?;
            if clip.frame_count() != e.frame_count || clip.resolution() != (manifest.resolution, manifest.resolution) {
                return Err(Error::Data(format!("clip {} does not match its manifest entry", e.id)));
            }
            clips.push(clip.frames);
        }
        Ok(Self { manifest, clips })
    }
}

/// Builds the dataset described by `cfg` and writes it to `dir`.
pub fn build_dataset(cfg: &DataConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::generate(cfg, seed)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}

/// A sampled training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, T, H, W]`.
    pub videos: Tensor,
    pub captions: Vec<String>,
    pub labels: Vec<usize>,
    pub frames: usize,
    /// `(clip index, first frame)` of every sample.
    pub windows: Vec<(usize, usize)>,
}

/// Draws one frame count uniformly from `frame_range` (inclusive), then a
/// random clip and a random contiguous window of that length per sample.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    batch_size: usize,
    frame_range: (usize, usize),
    rng: &mut R,
) -> Result<Batch> {
    let t = rng.random_range(frame_range.0..=frame_range.1);
    sample_batch_with_frames(ds, batch_size, t, rng)
}

pub fn sample_batch_with_frames<R: Rng + ?Sized>(ds: &Dataset, batch_size: usize, t: usize, rng: &mut R) -> Result<Batch> {
    let fits: Vec<usize> = (0..ds.len()).filter(|&i| ds.clips[i].shape()[0] >= t).collect();
    if fits.is_empty() {
        return Err(Error::Data(format!("no clip has {t} frames")));
    }
    let mut windows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut i = rng.random_range(0..ds.len());
        while ds.clips[i].shape()[0] < t {
            i = fits[rng.random_range(0..fits.len())];
        }
        let start = rng.random_range(0..=ds.clips[i].shape()[0] - t);
        windows.push((i, start));
    }
    assemble(ds, &windows, t)
}

/// Stacks the given `(clip, start)` windows of length `t`.
pub fn assemble(ds: &Dataset, windows: &[(usize, usize)], t: usize) -> Result<Batch> {
    let mut frames = Vec::with_capacity(windows.len());
    for &(i, start) in windows {
        let c = &ds.clips[i];
        let per = c.len() / c.shape()[0];
        let mut shape = c.shape().to_vec();
        shape[0] = t;
        frames.push(Tensor::new(shape, c.data()[start * per..(start + t) * per].to_vec())?);
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    Ok(Batch {
        videos: VideoClip::to_batch(&refs)?,
        captions: windows.iter().map(|&(i, _)| ds.manifest.clips[i].caption.clone()).collect(),
        labels: windows.iter().map(|&(i, _)| ds.manifest.clips[i].class).collect(),
        frames: t,
        windows: windows.to_vec(),
    })
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} clips at {}×{}, seed {}", self.clips.len(), self.resolution, self.resolution, self.seed)?;
        for (k, (c, n)) in self.classes.iter().zip(self.class_counts()).enumerate() {
            writeln!(f, "  class {k}: {n:4} × {c:?}")?;
        }
        Ok(())
    }
}
