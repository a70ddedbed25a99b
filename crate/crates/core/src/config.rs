//! Run configuration: JSON files with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::text::EmbeddingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of classes taken from the front of the canonical caption list.
    pub num_classes: usize,
    pub clips_per_class: usize,
    /// Frames stored per clip.
    pub frames: usize,
    pub resolution: usize,
    /// Nominal displacement per frame, in pixels.
    pub step_size: f32,
    /// Random start position, size and speed per clip.
    pub jitter: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clips_per_class: 100,
            frames: 16,
            resolution: 32,
            step_size: 1.0,
            jitter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw embedding width.
    pub d_raw: usize,
    /// Hidden width of the text projection head.
    pub text_hidden: usize,
    pub embedding: EmbeddingConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_raw: 1024,
            text_hidden: 512,
            embedding: EmbeddingConfig::default(),
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Inclusive range of frames per step.
    pub frame_min: usize,
    pub frame_max: usize,
    pub checkpoint_interval: u64,
    pub spectral_power_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch_size: 8,
            total_steps: 2000,
            frame_min: 5,
            frame_max: 9,
            checkpoint_interval: 500,
            spectral_power_iterations: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Feature width `d_f`.
    pub feature_dim: usize,
    pub base_channels: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub target_accuracy: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256,
            base_channels: 8,
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Joint embedding width `d_r`.
    pub embed_dim: usize,
    pub base_channels: usize,
    pub margin: f32,
    pub max_epochs: usize,
    /// Stop once top-1 accuracy has not improved for this many epochs.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            base_channels: 8,
            margin: 0.2,
            max_epochs: 30,
            patience: 4,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames per evaluated clip.
    pub frames: usize,
    /// Generated clips for IS, FID and accuracy.
    pub num_generated: usize,
    /// Real clips for FID.
    pub num_real: usize,
    pub is_splits: usize,
    pub pool_size: usize,
    pub num_queries: usize,
    /// Perturbations per query are drawn from this inclusive range.
    pub min_perturbations: usize,
    pub max_perturbations: usize,
    /// Probability that a perturbation drops a token rather than replacing one.
    pub drop_probability: f64,
    /// Monte-Carlo repetitions for the random-scorer baseline.
    pub baseline_reps: usize,
    pub classifier: ClassifierConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            num_generated: 100,
            num_real: 100,
            is_splits: 1,
            pool_size: 100,
            num_queries: 30,
            min_perturbations: 5,
            max_perturbations: 11,
            drop_probability: 0.5,
            baseline_reps: 2000,
            classifier: ClassifierConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 5] = ["toy", "full", "tiny", "smoke", "robot"];

impl RunConfig {
    /// Named starting points:
    /// * `toy`: 3 classes at 32×32, the default widths;
    /// * `full`: 64×64 output with the full-width generator;
    /// * `tiny`: 32×32 with narrow networks for single-core runs;
    /// * `smoke`: 200 steps, batch 4, 16×16, narrow networks;
    /// * `robot`: 11 classes with fixed 16-frame clips.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "toy" => {}
            "full" => {
                c.data.resolution = 64;
                c.data.step_size = 2.0;
                c.model.generator = GeneratorConfig::full();
                c.model.discriminator.resolution = 64;
            }
            "tiny" => c.make_tiny(),
            "smoke" => {
                c.make_tiny();
                c.data.resolution = 16;
                c.data.step_size = 0.4;
                c.data.clips_per_class = 20;
                c.model.generator.block_count = 2;
                c.model.generator.channel_schedule = vec![16, 8];
                c.model.discriminator.resolution = 16;
                c.train.total_steps = 200;
                c.train.batch_size = 4;
                c.train.checkpoint_interval = 100;
            }
            "robot" => {
                c.data.num_classes = 11;
                c.data.clips_per_class = 30;
                c.train.frame_min = 16;
                c.train.frame_max = 16;
                c.eval.frames = 16;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    fn make_tiny(&mut self) {
        self.model.d_raw = 1024;
        self.model.text_hidden = 512;
        self.model.generator = GeneratorConfig::tiny();
        self.model.discriminator = DiscriminatorConfig::tiny();
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file. A file holding `{"preset": "<name>", ...}` starts
    /// from that preset and applies the remaining keys on top.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = match v.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, v, "")?;
        let c: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        let next: Self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.learning_rate.is_nan() || t.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if t.frame_min < 2 || t.frame_max > 16 || t.frame_min > t.frame_max {
            return Err(Error::Config(format!(
                "train frame range [{}, {}] must lie within [2, 16]",
                t.frame_min, t.frame_max
            )));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.data.frames < t.frame_max || self.data.frames < self.eval.frames {
            return Err(Error::Config(format!(
                "data.frames = {} is shorter than the frames requested for training or evaluation",
                self.data.frames
            )));
        }
        if self.data.num_classes == 0 || self.data.num_classes > crate::data::CANONICAL_CLASSES.len() {
            return Err(Error::Config(format!(
                "data.num_classes must be in 1..={}",
                crate::data::CANONICAL_CLASSES.len()
            )));
        }
        self.model.generator.validate()?;
        let (h, w) = self.model.generator.output_hw();
        if h != self.data.resolution || w != self.data.resolution || self.model.discriminator.resolution != h {
            return Err(Error::Config(format!(
                "generator output {h}×{w}, discriminator input {} and data resolution {} must agree",
                self.model.discriminator.resolution, self.data.resolution
            )));
        }
        self.model.discriminator.block_count()?;
        let e = &self.eval;
        if e.min_perturbations < 1 || e.min_perturbations > e.max_perturbations || e.max_perturbations + 1 >= e.pool_size {
            return Err(Error::Config("eval perturbation range is inconsistent with the pool size".into()));
        }
        Ok(())
    }

    /// Every leaf key with its default, for `--help`.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&serde_json::to_value(Self::default()).expect("config serializes"), "", &mut out);
        out
    }
}

/// Module that consumes a config key.
pub fn consumer(key: &str) -> &'static str {
    const TABLE: [(&str, &str); 10] = [
        ("seed", "cli"),
        ("data.", "toy_data"),
        ("model.embedding.", "text_encoder"),
        ("model.d_raw", "text_encoder"),
        ("model.text_hidden", "text_encoder"),
        ("model.generator.", "frame_generator / latent_path"),
        ("model.discriminator.", "discriminator"),
        ("train.", "gan_training"),
        ("eval.", "metrics_eval"),
        ("", "cli"),
    ];
    TABLE.iter().find(|(p, _)| key.starts_with(p)).map(|(_, m)| *m).unwrap_or("cli")
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
