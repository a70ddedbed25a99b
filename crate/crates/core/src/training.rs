//! Hinge objectives, Adam, the alternating training step, checkpoints and
//! the metrics log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use log::info;
use pathvid_nn::{Graph, ParamKind, ParamStore, Session, SpectralState, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{sample_batch, Batch, Dataset};
use crate::discriminator::ScoreTriple;
use crate::error::{Error, IoContext, Result};
use crate::model::{Model, DISC_PREFIX, GEN_PREFIX, TEXT_PREFIX};
use crate::nta;

/// `mean_b(−d3d − d2d − dr)`.
pub fn generator_loss(g: &mut Graph, fake: &ScoreTriple) -> Result<Var> {
    let sum = g.add(fake.d3d, fake.d2d)?;
    let sum = g.add(sum, fake.dr)?;
    let m = g.mean(sum);
    Ok(g.scale(m, -1.0))
}

/// `mean_b Σ_heads([1 − real]₊ + [1 + fake]₊)`.
pub fn discriminator_loss(g: &mut Graph, real: &ScoreTriple, fake: &ScoreTriple) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (r, f) in [(real.d3d, fake.d3d), (real.d2d, fake.d2d), (real.dr, fake.dr)] {
        let neg = g.scale(r, -1.0);
        let lr = g.add_scalar(neg, 1.0);
        let lr = g.relu(lr);
        let lf = g.add_scalar(f, 1.0);
        let lf = g.relu(lf);
        let head = g.add(lr, lf)?;
        total = Some(match total {
            Some(t) => g.add(t, head)?,
            None => head,
        });
    }
    Ok(g.mean(total.expect("three heads")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// One Adam update with bias correction.
pub fn adam_update(value: &mut Tensor, grad: &Tensor, slot: &mut AdamSlot, hp: &AdamParams) {
    slot.t += 1;
    let t = slot.t as i32;
    let c1 = 1.0 - (hp.beta1 as f64).powi(t);
    let c2 = 1.0 - (hp.beta2 as f64).powi(t);
    let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
    for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let mh = *m as f64 / c1;
        let vh = *v as f64 / c2;
        *w -= (hp.lr as f64 * mh / (vh.sqrt() + hp.eps as f64)) as f32;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

/// Adam state for every weight it has updated, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self { params, slots: BTreeMap::new() }
    }

    /// Updates every weight named with one of `prefixes` from its stored
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore, prefixes: &[&str]) {
        let ids: Vec<_> = store.weights_with_prefix(prefixes).collect();
        for id in ids {
            let p = store.get_mut(id);
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(p.value.shape().to_vec()),
                v: Tensor::zeros(p.value.shape().to_vec()),
                t: 0,
            });
            let grad = p.grad.clone();
            adam_update(&mut p.value, &grad, slot, &self.params);
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L_D")]
    pub loss_d: f32,
    #[serde(rename = "L_G")]
    pub loss_g: f32,
    pub d3d_real: f32,
    pub d3d_fake: f32,
    pub d2d_real: f32,
    pub d2d_fake: f32,
    pub dr_real: f32,
    pub dr_fake: f32,
    #[serde(rename = "T")]
    pub frames: usize,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self { wall_ms: 0, ..self.clone() } == Self { wall_ms: 0, ..other.clone() }
    }
}

fn mean_of(s: &Session, v: Var) -> f32 {
    s.value(v).mean()
}

/// Model, optimizer and sampling state of a training run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        Ok(Self::from_model(config, model))
    }

    pub fn from_model(config: &RunConfig, model: Model) -> Self {
        let t = &config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            config: config.clone(),
            model,
            adam: Adam::new(AdamParams {
                lr: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            }),
            rng,
            step: 0,
        }
    }

    /// Samples a batch and runs one D update followed by one G update.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepRecord> {
        let batch = self.sample_batch(ds)?;
        self.step_on_batch(&batch)
    }

    /// Draws the next training batch, advancing the sampling stream.
    pub fn sample_batch(&mut self, ds: &Dataset) -> Result<Batch> {
        let t = &self.config.train;
        sample_batch(ds, t.batch_size, (t.frame_min, t.frame_max), &mut self.rng)
    }

    pub fn step_on_batch(&mut self, batch: &Batch) -> Result<StepRecord> {
        let start = Instant::now();
        let iters = self.config.train.spectral_power_iterations;
        self.model.store.power_iterate_prefixed(&[GEN_PREFIX, DISC_PREFIX], iters);
        let raw = self.model.embed(&batch.captions)?;
        let d = self.d_step(batch, &raw)?;
        let g = self.g_step(batch, &raw)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss_d: d.loss,
            loss_g: g.0,
            d3d_real: d.real[0],
            d2d_real: d.real[1],
            dr_real: d.real[2],
            d3d_fake: d.fake[0],
            d2d_fake: d.fake[1],
            dr_fake: d.fake[2],
            frames: batch.frames,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn abort(&self, what: &str, value: f32) -> Error {
        Error::NumericAbort {
            step: self.step + 1,
            detail: format!("{what} = {value}"),
        }
    }

    /// Discriminator (and text head) update against detached fakes.
    pub fn d_step(&mut self, batch: &Batch, raw: &Tensor) -> Result<DStepOutput> {
        let b = batch.captions.len();
        let noise = self.model.noise(b, batch.frames, &mut self.rng);
        let model = &self.model;
        let mut s = Session::train(&model.store, &[DISC_PREFIX, TEXT_PREFIX]);
        let e = model.encode(&mut s, raw)?;
        let fake = model.generate_from_codes(s.value(e), &noise, s.mode())?;
        let real_v = s.constant(batch.videos.clone());
        let fake_v = s.constant(fake);
        let real = model.disc.forward(&mut s, real_v, e)?.scores;
        let fake = model.disc.forward(&mut s, fake_v, e)?.scores;
        let loss = discriminator_loss(&mut s.graph, &real, &fake)?;
        let out = DStepOutput {
            loss: s.value(loss).item(),
            real: [mean_of(&s, real.d3d), mean_of(&s, real.d2d), mean_of(&s, real.dr)],
            fake: [mean_of(&s, fake.d3d), mean_of(&s, fake.d2d), mean_of(&s, fake.dr)],
        };
        if !out.loss.is_finite() {
            return Err(self.abort("L_D", out.loss));
        }
        let (graph, updates) = s.finish();
        let grads = graph.backward(loss)?;
        drop(graph);
        updates.apply(&mut self.model.store);
        zero_grads(&mut self.model.store, &[DISC_PREFIX, TEXT_PREFIX]);
        self.model.store.accumulate(&grads);
        self.adam.step(&mut self.model.store, &[DISC_PREFIX, TEXT_PREFIX]);
        Ok(out)
    }

    /// Generator (and text head) update through the discriminator.
    pub fn g_step(&mut self, batch: &Batch, raw: &Tensor) -> Result<(f32,)> {
        let b = batch.captions.len();
        let noise = self.model.noise(b, batch.frames, &mut self.rng);
        let model = &self.model;
        let mut s = Session::train(&model.store, &[GEN_PREFIX, TEXT_PREFIX]);
        let e = model.encode(&mut s, raw)?;
        let video = model.gen.forward(&mut s, e, &noise)?.video;
        let scores = model.disc.forward(&mut s, video, e)?.scores;
        let loss = generator_loss(&mut s.graph, &scores)?;
        let value = s.value(loss).item();
        if !value.is_finite() {
            return Err(self.abort("L_G", value));
        }
        let (graph, updates) = s.finish();
        let grads = graph.backward(loss)?;
        drop(graph);
        updates.apply(&mut self.model.store);
        zero_grads(&mut self.model.store, &[GEN_PREFIX, TEXT_PREFIX]);
        self.model.store.accumulate(&grads);
        self.adam.step(&mut self.model.store, &[GEN_PREFIX, TEXT_PREFIX]);
        Ok((value,))
    }

    /// Writes a checkpoint archive to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let store = &self.model.store;
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (_, p) in store.iter() {
            owned.push((p.name.clone(), p.value.clone()));
            if let Some(sn) = &p.spectral {
                owned.push((format!("{}:sn_u", p.name), Tensor::new(vec![sn.u.len()], sn.u.clone())?));
                owned.push((format!("{}:sn_v", p.name), Tensor::new(vec![sn.v.len()], sn.v.clone())?));
            }
        }
        let mut steps = Vec::with_capacity(self.adam.slots.len());
        for (name, slot) in &self.adam.slots {
            owned.push((format!("adam.m:{name}"), slot.m.clone()));
            owned.push((format!("adam.v:{name}"), slot.v.clone()));
            steps.push(slot.t);
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = json!({
            "kind": "pathvid-checkpoint",
            "adam_slots": self.adam.slots.keys().collect::<Vec<_>>(),
            "adam_steps": steps,
            "config": self.config,
        });
        nta::write(dir, self.step, &nta::rng_to_hex(&self.rng), &refs, meta)
    }

    /// Restores a trainer from a checkpoint archive.
    pub fn load(dir: &Path) -> Result<Self> {
        let a = nta::read(dir)?;
        let bad = |name: &str, detail: String| Error::Integrity { name: name.to_string(), detail };
        let config: RunConfig = serde_json::from_value(a.meta.get("config").cloned().unwrap_or_default())
            .map_err(|e| bad("config", e.to_string()))?;
        let mut trainer = Trainer::new(&config)?;
        trainer.step = a.step;
        trainer.rng = nta::rng_from_hex(&a.rng_state)?;
        let get = |name: &str| a.get(name).ok_or_else(|| bad(name, "missing from checkpoint".into()));
        let store = &mut trainer.model.store;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let v = get(&p.name)?;
            if v.shape() != p.value.shape() {
                return Err(bad(&p.name, format!("shape {:?}, model expects {:?}", v.shape(), p.value.shape())));
            }
            p.value = v.clone();
            if p.spectral.is_some() {
                let u = get(&format!("{}:sn_u", p.name))?.data().to_vec();
                let w = get(&format!("{}:sn_v", p.name))?.data().to_vec();
                p.spectral = Some(SpectralState { u, v: w });
            }
        }
        let names: Vec<String> = serde_json::from_value(a.meta.get("adam_slots").cloned().unwrap_or_default())
            .map_err(|e| bad("adam_slots", e.to_string()))?;
        let steps: Vec<u64> = serde_json::from_value(a.meta.get("adam_steps").cloned().unwrap_or_default())
            .map_err(|e| bad("adam_steps", e.to_string()))?;
        if names.len() != steps.len() {
            return Err(bad("adam_steps", "length differs from adam_slots".into()));
        }
        for (name, t) in names.into_iter().zip(steps) {
            let m = get(&format!("adam.m:{name}"))?.clone();
            let v = get(&format!("adam.v:{name}"))?.clone();
            trainer.adam.slots.insert(name, AdamSlot { m, v, t });
        }
        Ok(trainer)
    }
}

/// Summary of a discriminator update.
#[derive(Clone, Debug, PartialEq)]
pub struct DStepOutput {
    pub loss: f32,
    /// Batch means of (d3d, d2d, dr) on real videos.
    pub real: [f32; 3],
    pub fake: [f32; 3],
}

/// Append-only JSON-lines metrics file.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .ctx(|| format!("opening {}", path.display()))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r)? + "\n";
        self.file.write_all(line.as_bytes()).ctx(|| "writing metrics log".into())
    }
}

/// Runs the trainer until `total_steps`, writing periodic checkpoints under
/// `out/checkpoints/` and always a final one. Stops early, after writing a
/// checkpoint, once `stop` is set.
pub fn run_training(
    trainer: &mut Trainer,
    ds: &Dataset,
    out: &Path,
    stop: Option<&AtomicBool>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PathBuf> {
    let ckpt_root = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_root).ctx(|| format!("creating {}", ckpt_root.display()))?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"))?;
    let total = trainer.config.train.total_steps;
    let interval = trainer.config.train.checkpoint_interval;
    while trainer.step < total {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            info!("interrupted at step {}", trainer.step);
            break;
        }
        let rec = match trainer.train_step(ds) {
            Ok(r) => r,
            Err(e @ Error::NumericAbort { .. }) => {
                let dir = ckpt_root.join("aborted");
                trainer.save(&dir)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.append(&rec)?;
        on_step(&rec);
        if interval > 0 && trainer.step.is_multiple_of(interval) && trainer.step < total {
            trainer.save(&ckpt_root.join(format!("step_{:07}", trainer.step)))?;
        }
    }
    let last = ckpt_root.join("final");
    trainer.save(&last)?;
    Ok(last)
}

/// Clears the gradients of weights with one of `prefixes`.
pub fn zero_grads(store: &mut ParamStore, prefixes: &[&str]) {
    let ids: Vec<_> = store.weights_with_prefix(prefixes).collect();
    for id in ids {
        store.get_mut(id).grad.data_mut().fill(0.0);
    }
}

/// Names of all weights (not buffers) with one of `prefixes`.
pub fn weight_names(store: &ParamStore, prefixes: &[&str]) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && prefixes.iter().any(|x| p.name.starts_with(x)))
        .map(|(_, p)| p.name.clone())
        .collect()
}
