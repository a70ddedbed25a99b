//! Evaluation: a small 3D-CNN classifier, Inception Score, Fréchet distance,
//! a retrieval network for R-precision, command accuracy and the smooth
//! transition probe.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pathvid_nn::{Builder, Dense, NormMode, ParamStore, Session, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ClassifierConfig, EvalConfig, RetrievalConfig, RunConfig};
use crate::data::{assemble, caption, Background, ClassSpec, Color, Dataset, Motion, Shape, CANONICAL_CLASSES};
use crate::discriminator::{DiscriminatorConfig, Encoder};
use crate::error::{Error, Result};
use crate::generator::VideoClip;
use crate::model::Model;
use crate::nta;
use crate::text::{EmbeddingProvider, Sentence};
use crate::training::{Adam, AdamParams};

const CHUNK: usize = 32;

fn optimizer(lr: f32) -> Adam {
    Adam::new(AdamParams {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    })
}

/// Row-wise softmax in double precision.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (o, v) in row.iter_mut().zip(e) {
            *o = (v / z) as f32;
        }
    }
    out
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Random `(clip, start)` windows of `t` frames, one per listed clip.
fn windows<R: Rng + ?Sized>(ds: &Dataset, clips: &[usize], t: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    clips
        .iter()
        .map(|&i| {
            let n = ds.clips[i].shape()[0];
            if n < t {
                return Err(Error::Data(format!("clip {i} has {n} frames, evaluation needs {t}")));
            }
            Ok((i, rng.random_range(0..=n - t)))
        })
        .collect()
}

/// Rows `[start, start + len)` of a `[N, ...]` tensor.
fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec())?)
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

/// 3D-CNN video classifier whose penultimate layer provides the features.
#[derive(Clone, Debug)]
pub struct EvalClassifier {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub feature: Dense,
    pub output: Dense,
    pub num_classes: usize,
    pub slope: f32,
}

impl EvalClassifier {
    pub fn new(cfg: &ClassifierConfig, resolution: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let count = DiscriminatorConfig { resolution, ..Default::default() }.block_count()?;
        let slope = pathvid_nn::LEAKY_SLOPE;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "cls");
        let encoder = Encoder::new(&mut b.scope("enc"), 3, cfg.base_channels, count, true, slope)?;
        let width = cfg.base_channels << (count - 1);
        let feature = b.dense("feature", width, cfg.feature_dim, true)?;
        let output = b.dense("output", cfg.feature_dim, num_classes, true)?;
        Ok(Self {
            store,
            encoder,
            feature,
            output,
            num_classes,
            slope,
        })
    }

    /// Features `[N, d_f]` and logits `[N, K]` of videos `[N, 3, T, H, W]`.
    pub fn forward(&self, s: &mut Session, videos: Var) -> Result<(Var, Var)> {
        let x = self.encoder.forward(s, videos)?;
        let pooled = s.graph.mean_keep(x, 2)?;
        let f = self.feature.forward(s, pooled)?;
        let f = s.graph.leaky_relu(f, self.slope);
        let logits = self.output.forward(s, f)?;
        Ok((f, logits))
    }

    pub fn logits(&self, videos: &Tensor) -> Result<Tensor> {
        Ok(self.features_logits(videos)?.1)
    }

    /// Features and logits of a batch, processed in chunks.
    pub fn features_logits(&self, videos: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = videos.shape()[0];
        let (mut fs, mut ls) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let mut s = Session::eval(&self.store);
            let v = s.constant(rows(videos, start, len)?);
            let (f, l) = self.forward(&mut s, v)?;
            fs.push(s.value(f).clone());
            ls.push(s.value(l).clone());
        }
        Ok((concat_rows(fs)?, concat_rows(ls)?))
    }

    /// Features `[N, d_f]` and class probabilities `[N, K]`.
    pub fn features_probs(&self, videos: &Tensor) -> Result<(Tensor, Tensor)> {
        let (f, l) = self.features_logits(videos)?;
        Ok((f, softmax(&l)))
    }

    pub fn predict(&self, videos: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(videos)?;
        Ok((0..l.shape()[0]).map(|i| argmax(l.row(i))).collect())
    }

    /// Fraction of `t`-frame windows (one per clip) classified correctly.
    pub fn accuracy(&self, ds: &Dataset, t: usize, rng: &mut impl Rng) -> Result<f64> {
        let all: Vec<usize> = (0..ds.len()).collect();
        let batch = assemble(ds, &windows(ds, &all, t, rng)?, t)?;
        let pred = self.predict(&batch.videos)?;
        Ok(command_accuracy(&pred, &batch.labels))
    }
}

/// Outcome of classifier training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: usize,
    pub accuracy: f64,
}

/// Trains a classifier on `t`-frame windows with cross-entropy until the
/// training accuracy reaches the target or the epoch cap. Fails with
/// [`Error::EvalUnreliable`] unless the accuracy exceeds twice chance.
pub fn train_eval_classifier(ds: &Dataset, cfg: &ClassifierConfig, t: usize, seed: u64) -> Result<(EvalClassifier, FitSummary)> {
    let (net, summary) = fit_classifier(ds, cfg, t, seed)?;
    check_reliable(summary.accuracy, ds.num_classes())?;
    Ok((net, summary))
}

/// [`train_eval_classifier`] without the reliability check.
pub fn fit_classifier(ds: &Dataset, cfg: &ClassifierConfig, t: usize, seed: u64) -> Result<(EvalClassifier, FitSummary)> {
    let k = ds.num_classes();
    let mut net = EvalClassifier::new(cfg, ds.manifest.resolution, k, seed)?;
    let mut adam = optimizer(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut summary = FitSummary { epochs: 0, accuracy: 0.0 };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble(ds, &windows(ds, chunk, t, &mut rng)?, t)?;
            let mut s = Session::train(&net.store, &[""]);
            let v = s.constant(batch.videos);
            let (_, logits) = net.forward(&mut s, v)?;
            let loss = s.graph.softmax_cross_entropy(logits, &batch.labels)?;
            let (graph, _) = s.finish();
            let grads = graph.backward(loss)?;
            net.store.zero_grads();
            net.store.accumulate(&grads);
            adam.step(&mut net.store, &[""]);
        }
        summary = FitSummary {
            epochs: epoch,
            accuracy: net.accuracy(ds, t, &mut rng)?,
        };
        info!("classifier epoch {epoch}: train accuracy {:.3}", summary.accuracy);
        if summary.accuracy >= cfg.target_accuracy as f64 {
            break;
        }
    }
    Ok((net, summary))
}

/// Rejects a classifier whose accuracy does not exceed twice chance.
pub fn check_reliable(accuracy: f64, num_classes: usize) -> Result<()> {
    let floor = (2.0 / num_classes as f64).min(1.0);
    if num_classes > 1 && accuracy <= floor && accuracy < 1.0 {
        return Err(Error::EvalUnreliable(format!(
            "classifier accuracy {accuracy:.3} does not exceed twice chance ({floor:.3})"
        )));
    }
    Ok(())
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over `splits` equal parts; returns the mean
/// and population standard deviation across parts.
pub fn inception_score(probs: &Tensor, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if n < 2 || splits == 0 || splits > n {
        return Err(Error::Contract(format!("inception score of {n} samples in {splits} splits")));
    }
    let mut scores = Vec::with_capacity(splits);
    for part in 0..splits {
        let (lo, hi) = (part * n / splits, (part + 1) * n / splits);
        let mut marginal = vec![0f64; k];
        for i in lo..hi {
            for (m, &p) in marginal.iter_mut().zip(probs.row(i)) {
                *m += p as f64;
            }
        }
        marginal.iter_mut().for_each(|m| *m /= (hi - lo) as f64);
        let mut kl = 0.0;
        for i in lo..hi {
            for (&p, &m) in probs.row(i).iter().zip(&marginal) {
                let p = p as f64;
                if p > 0.0 {
                    kl += p * (p.ln() - m.ln());
                }
            }
        }
        scores.push((kl / (hi - lo) as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

pub const COV_REGULARIZER: f64 = 1e-6;

impl GaussianStats {
    /// Empirical statistics of feature rows `[N, d]` (unbiased covariance
    /// plus `1e-6·I`).
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        if n < 2 {
            return Err(Error::Contract(format!("statistics need at least 2 samples, got {n}")));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centred = x;
        for j in 0..d {
            centred.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let mut cov = centred.transpose() * &centred / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for j in 0..d {
            cov[(j, j)] += COV_REGULARIZER;
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let s = Self { mean, cov, count };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.shape() != (d, d) {
            return Err(Error::Contract(format!("mean of width {d} with covariance {:?}", self.cov.shape())));
        }
        let asym = (&self.cov - self.cov.transpose()).abs().max();
        if asym > 1e-8 {
            return Err(Error::Contract(format!("covariance is not symmetric (max asymmetry {asym:e})")));
        }
        if self.count < 2 {
            return Err(Error::Contract(format!("statistics from {} samples", self.count)));
        }
        Ok(())
    }
}

/// Eigenvalues with small negatives clamped to zero; larger negatives are
/// an error.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    for l in eig.eigenvalues.iter_mut() {
        if *l < -1e-6 * top {
            return Err(Error::Numeric(format!("{what} has eigenvalue {l:e}")));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Symmetric PSD square root.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m.clone(), "covariance")?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::Contract(format!(
            "feature widths {} and {} differ",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let root = sqrtm_psd(&a.cov)?;
    let m = &root * &b.cov * &root;
    let m = (&m + m.transpose()) * 0.5;
    let eig = clamped_eigen(m, "covariance product")?;
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let shift = (&a.mean - &b.mean).norm_squared();
    Ok((shift + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Per-class Fréchet distances and their unweighted mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntraFid {
    pub per_class: BTreeMap<String, f64>,
    pub mean: Option<f64>,
}

/// Fréchet distance within every class; classes with fewer than two real or
/// generated samples are skipped.
pub fn intra_class_fid(
    real: &BTreeMap<String, Tensor>,
    fake: &BTreeMap<String, Tensor>,
) -> Result<IntraFid> {
    let mut out = IntraFid::default();
    for (class, r) in real {
        let Some(f) = fake.get(class) else {
            warn!("intra-FID: no generated samples for {class:?}, skipped");
            continue;
        };
        if r.shape()[0] < 2 || f.shape()[0] < 2 {
            warn!("intra-FID: {class:?} has fewer than 2 samples, skipped");
            continue;
        }
        let v = frechet_distance(&GaussianStats::from_features(r)?, &GaussianStats::from_features(f)?)?;
        out.per_class.insert(class.clone(), v);
    }
    if !out.per_class.is_empty() {
        out.mean = Some(out.per_class.values().sum::<f64>() / out.per_class.len() as f64);
    }
    Ok(out)
}

/// Groups feature rows by label name.
pub fn group_rows(features: &Tensor, labels: &[usize], names: &[String]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).collect();
        if !idx.is_empty() {
            out.insert(name.clone(), features.select_rows(&idx));
        }
    }
    Ok(out)
}

/// Joint video/sentence embedding compared by cosine similarity.
#[derive(Clone, Debug)]
pub struct RetrievalNet {
    pub store: ParamStore,
    pub video: Encoder,
    pub video_fc: Dense,
    pub text_fc1: Dense,
    pub text_fc2: Dense,
    pub provider: EmbeddingProvider,
    pub slope: f32,
}

impl RetrievalNet {
    pub fn new(cfg: &RetrievalConfig, resolution: usize, provider: EmbeddingProvider, seed: u64) -> Result<Self> {
        let count = DiscriminatorConfig { resolution, ..Default::default() }.block_count()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut b = Builder::new(&mut store, &mut rng, "ret");
        let video = Encoder::new(&mut b.scope("video"), 3, cfg.base_channels, count, true, pathvid_nn::LEAKY_SLOPE)?;
        let video_fc = b.dense("video_fc", cfg.base_channels << (count - 1), cfg.embed_dim, true)?;
        let hidden = 2 * cfg.embed_dim;
        let text_fc1 = b.dense("text_fc1", provider.dim(), hidden, true)?;
        let text_fc2 = b.dense("text_fc2", hidden, cfg.embed_dim, true)?;
        Ok(Self {
            store,
            video,
            video_fc,
            text_fc1,
            text_fc2,
            provider,
            slope: pathvid_nn::LEAKY_SLOPE,
        })
    }

    /// Unit-norm video embeddings `[N, d_r]`.
    pub fn encode_videos(&self, s: &mut Session, videos: Var) -> Result<Var> {
        let x = self.video.forward(s, videos)?;
        let pooled = s.graph.mean_keep(x, 2)?;
        let v = self.video_fc.forward(s, pooled)?;
        Ok(s.graph.l2_normalize_rows(v)?)
    }

    /// Unit-norm sentence embeddings `[M, d_r]`.
    pub fn encode_sentences<S: AsRef<str>>(&self, s: &mut Session, sentences: &[S]) -> Result<Var> {
        let raw = s.constant(self.provider.embed_batch(sentences)?);
        let h = self.text_fc1.forward(s, raw)?;
        let h = s.graph.leaky_relu(h, self.slope);
        let e = self.text_fc2.forward(s, h)?;
        Ok(s.graph.l2_normalize_rows(e)?)
    }

    pub fn video_embeddings(&self, videos: &Tensor) -> Result<Tensor> {
        let n = videos.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let mut s = Session::eval(&self.store);
            let v = s.constant(rows(videos, start, len)?);
            let e = self.encode_videos(&mut s, v)?;
            parts.push(s.value(e).clone());
        }
        concat_rows(parts)
    }

    pub fn sentence_embeddings<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let e = self.encode_sentences(&mut s, sentences)?;
        Ok(s.value(e).clone())
    }

    /// Cosine similarity of one video embedding against each sentence.
    pub fn similarities(&self, video: &[f32], sentences: &Tensor) -> Vec<f32> {
        (0..sentences.shape()[0])
            .map(|i| sentences.row(i).iter().zip(video).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Top-1 accuracy of retrieving each clip's caption among the class
    /// captions.
    pub fn top1(&self, ds: &Dataset, t: usize, rng: &mut impl Rng) -> Result<f64> {
        let all: Vec<usize> = (0..ds.len()).collect();
        let batch = assemble(ds, &windows(ds, &all, t, rng)?, t)?;
        let v = self.video_embeddings(&batch.videos)?;
        let s = self.sentence_embeddings(&ds.manifest.classes)?;
        let hits = (0..v.shape()[0])
            .filter(|&i| argmax(&self.similarities(v.row(i), &s)) == batch.labels[i])
            .count();
        Ok(hits as f64 / v.shape()[0] as f64)
    }
}

/// Mean of `[margin − cos(v_i, s_i) + cos(v_i, s_j)]₊` over the pairs with
/// `negative[i][j]`.
pub fn ranking_loss(g: &mut pathvid_nn::Graph, v: Var, s: Var, negative: &[Vec<bool>], margin: f32) -> Result<Var> {
    let (b, m) = (g.shape(v)[0], g.shape(s)[0]);
    if negative.len() != b || negative.iter().any(|r| r.len() != m) || m < b {
        return Err(Error::Contract(format!("negative mask for {b} anchors and {m} sentences")));
    }
    let st = g.permute(s, &[1, 0])?;
    let sim = g.matmul(v, st)?;
    let eye = g.constant(Tensor::from_fn([b, m], |k| if k / m == k % m { 1.0 } else { 0.0 }));
    let diag = g.mul(sim, eye)?;
    let ones_col = g.constant(Tensor::ones([m, 1]));
    let pos = g.matmul(diag, ones_col)?;
    let ones_row = g.constant(Tensor::ones([1, m]));
    let pos = g.matmul(pos, ones_row)?;
    let h = g.sub(sim, pos)?;
    let h = g.add_scalar(h, margin);
    let h = g.relu(h);
    let mask: Vec<f32> = negative.iter().flatten().map(|&n| if n { 1.0 } else { 0.0 }).collect();
    let count = mask.iter().sum::<f32>().max(1.0);
    let mask = g.constant(Tensor::new(vec![b, m], mask)?);
    let h = g.mul(h, mask)?;
    let total = g.sum(h);
    Ok(g.scale(total, 1.0 / count))
}

/// Random grammar caption differing from `spec` in both shape and motion.
fn random_distractor<R: Rng + ?Sized>(spec: &ClassSpec, rng: &mut R) -> String {
    let shapes: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != spec.shape).collect();
    let motions: Vec<Motion> = Motion::ALL.into_iter().filter(|&m| m != spec.motion).collect();
    caption(
        Color::ALL[rng.random_range(0..Color::ALL.len())],
        shapes[rng.random_range(0..shapes.len())],
        motions[rng.random_range(0..motions.len())],
        Background::ALL[rng.random_range(0..Background::ALL.len())],
    )
}

/// Class description of a canonical caption.
pub fn class_spec_of(caption: &str) -> Option<ClassSpec> {
    CANONICAL_CLASSES.iter().copied().find(|c| c.caption() == caption)
}

fn spec_of(ds: &Dataset, class: usize) -> Result<ClassSpec> {
    let c = &ds.manifest.classes[class];
    class_spec_of(c).ok_or_else(|| Error::Data(format!("class caption {c:?} is not a canonical class")))
}

/// Trains the retrieval network with in-batch negatives plus one sampled
/// grammar caption per anchor, until top-1 training retrieval stops
/// improving.
pub fn train_retrieval_net(
    ds: &Dataset,
    cfg: &RetrievalConfig,
    provider: EmbeddingProvider,
    t: usize,
    seed: u64,
) -> Result<(RetrievalNet, FitSummary)> {
    let mut net = RetrievalNet::new(cfg, ds.manifest.resolution, provider, seed)?;
    let specs: Vec<ClassSpec> = (0..ds.num_classes()).map(|k| spec_of(ds, k)).collect::<Result<_>>()?;
    let mut adam = optimizer(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let (mut best, mut since, mut summary) = (f64::NEG_INFINITY, 0, FitSummary { epochs: 0, accuracy: 0.0 });
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble(ds, &windows(ds, chunk, t, &mut rng)?, t)?;
            let b = chunk.len();
            let mut sentences = batch.captions.clone();
            sentences.extend(batch.labels.iter().map(|&l| random_distractor(&specs[l], &mut rng)));
            let negative: Vec<Vec<bool>> = (0..b)
                .map(|i| {
                    (0..2 * b)
                        .map(|j| if j < b { batch.labels[j] != batch.labels[i] } else { j - b == i })
                        .collect()
                })
                .collect();
            let mut s = Session::train(&net.store, &[""]);
            let videos = s.constant(batch.videos);
            let v = net.encode_videos(&mut s, videos)?;
            let e = net.encode_sentences(&mut s, &sentences)?;
            let loss = ranking_loss(&mut s.graph, v, e, &negative, cfg.margin)?;
            let (graph, _) = s.finish();
            let grads = graph.backward(loss)?;
            net.store.zero_grads();
            net.store.accumulate(&grads);
            adam.step(&mut net.store, &[""]);
        }
        let acc = net.top1(ds, t, &mut rng)?;
        summary = FitSummary { epochs: epoch, accuracy: acc };
        info!("retrieval epoch {epoch}: top-1 {acc:.3}");
        if acc > best + 1e-9 {
            best = acc;
            since = 0;
        } else {
            since += 1;
        }
        if acc >= 1.0 || since >= cfg.patience {
            break;
        }
    }
    Ok((net, summary))
}

/// Removes the token at `index`.
pub fn drop_token(s: &Sentence, index: usize) -> Sentence {
    let mut tokens = s.tokens.clone();
    tokens.remove(index);
    Sentence::new(&tokens.join(" "))
}

/// Up to `count` distinct variants of `s`, each differing from it by one
/// dropped non-first token or one token replaced from `vocab`.
pub fn perturb_sentence<R: Rng + ?Sized>(
    s: &Sentence,
    vocab: &[String],
    rng: &mut R,
    count: usize,
    drop_probability: f64,
) -> Vec<Sentence> {
    let n = s.tokens.len();
    let mut out: Vec<Sentence> = Vec::new();
    for _ in 0..50 * count.max(1) {
        if out.len() == count || n == 0 {
            break;
        }
        let v = if n >= 2 && rng.random_bool(drop_probability) {
            drop_token(s, rng.random_range(1..n))
        } else {
            let i = rng.random_range(0..n);
            let word = &vocab[rng.random_range(0..vocab.len())];
            if *word == s.tokens[i] {
                continue;
            }
            let mut tokens = s.tokens.clone();
            tokens[i] = word.clone();
            Sentence::new(&tokens.join(" "))
        };
        if v.tokens != s.tokens && !out.iter().any(|o| o.tokens == v.tokens) {
            out.push(v);
        }
    }
    out
}

/// One R-precision query: the prompt and its ranked pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalQuery {
    pub sentence: String,
    pub class: usize,
    pub pool: Vec<String>,
    pub related: Vec<bool>,
}

impl RetrievalQuery {
    pub fn num_related(&self) -> usize {
        self.related.iter().filter(|&&r| r).count()
    }
}

/// Pool of `cfg.pool_size` sentences: the prompt, between
/// `min_perturbations` and `max_perturbations` perturbations of it, and
/// grammar captions differing from it in shape and motion.
pub fn build_query<R: Rng + ?Sized>(spec: &ClassSpec, class: usize, cfg: &EvalConfig, rng: &mut R) -> Result<RetrievalQuery> {
    let sentence = spec.caption();
    let k = rng.random_range(cfg.min_perturbations..=cfg.max_perturbations);
    let vocab = crate::data::vocabulary();
    let perturbed = perturb_sentence(&Sentence::new(&sentence), &vocab, rng, k, cfg.drop_probability);
    let mut related: Vec<String> = std::iter::once(sentence.clone())
        .chain(perturbed.into_iter().map(|s| s.tokens.join(" ")))
        .collect();
    related.dedup();
    let mut distractors = Vec::new();
    for color in Color::ALL {
        for shape in Shape::ALL.into_iter().filter(|&s| s != spec.shape) {
            for motion in Motion::ALL.into_iter().filter(|&m| m != spec.motion) {
                for bg in Background::ALL {
                    distractors.push(caption(color, shape, motion, bg));
                }
            }
        }
    }
    let need = cfg
        .pool_size
        .checked_sub(related.len())
        .filter(|&n| n <= distractors.len())
        .ok_or_else(|| Error::Config(format!("cannot fill a pool of {} sentences", cfg.pool_size)))?;
    distractors.shuffle(rng);
    let mut pool: Vec<(String, bool)> = related.into_iter().map(|s| (s, true)).collect();
    pool.extend(distractors.into_iter().take(need).map(|s| (s, false)));
    pool.shuffle(rng);
    let (pool, related) = pool.into_iter().unzip();
    Ok(RetrievalQuery {
        sentence,
        class,
        pool,
        related,
    })
}

/// Required pool size.
pub const POOL_SIZE: usize = 100;

/// `r / R` where `R` is the number of related entries and `r` the number of
/// them among the `R` highest scores (ties broken by position).
pub fn r_precision_score(scores: &[f32], related: &[bool]) -> Result<f64> {
    if scores.len() != POOL_SIZE || related.len() != POOL_SIZE {
        return Err(Error::Contract(format!(
            "R-precision pool must hold {POOL_SIZE} sentences, got {}",
            scores.len()
        )));
    }
    let r_total = related.iter().filter(|&&r| r).count();
    if r_total == 0 {
        return Err(Error::Contract("R-precision pool has no related sentence".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let hits = idx[..r_total].iter().filter(|&&i| related[i]).count();
    Ok(hits as f64 / r_total as f64)
}

/// Mean and standard deviation, over `reps` repetitions, of the mean
/// R-precision a uniformly random ranking achieves on queries with the
/// given related counts.
pub fn random_baseline<R: Rng + ?Sized>(related_counts: &[usize], pool: usize, reps: usize, rng: &mut R) -> (f64, f64) {
    let mut means = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut total = 0.0;
        for &r in related_counts {
            let hits = rand::seq::index::sample(rng, pool, r).iter().filter(|&i| i < r).count();
            total += hits as f64 / r as f64;
        }
        means.push(total / related_counts.len() as f64);
    }
    let mean = means.iter().sum::<f64>() / reps as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
    (mean, var.sqrt())
}

/// Fraction of predictions equal to the prompt class.
pub fn command_accuracy(predicted: &[usize], prompted: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(prompted).filter(|(a, b)| a == b).count() as f64 / predicted.len() as f64
}

/// Generates one clip per prompt in chunks of `chunk` (batch statistics),
/// prompts assigned in order.
pub fn generate_batch<R: Rng + ?Sized>(
    model: &Model,
    prompts: &[String],
    frames: usize,
    chunk: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for group in prompts.chunks(chunk.max(2)) {
        let mut list: Vec<String> = group.to_vec();
        if list.len() < 2 {
            list.push(list[0].clone());
        }
        let raw = model.embed(&list)?;
        let noise = model.noise(list.len(), frames, rng);
        let v = model.generate(&raw, &noise, NormMode::Batch)?;
        parts.push(rows(&v, 0, group.len())?);
    }
    concat_rows(parts)
}

/// One clip per sentence. Batch mode generates all sentences together,
/// padding with duplicates up to two; running mode generates each sentence
/// alone with noise stream `i`.
pub fn generate_clips(model: &Model, sentences: &[String], frames: usize, seed: u64, mode: NormMode) -> Result<Vec<VideoClip>> {
    if sentences.is_empty() {
        return Ok(Vec::new());
    }
    match mode {
        NormMode::Batch => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = generate_batch(model, sentences, frames, sentences.len(), &mut rng)?;
            VideoClip::from_batch(&v, sentences)
        }
        NormMode::Running => {
            let mut out = Vec::with_capacity(sentences.len());
            for (i, sentence) in sentences.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let raw = model.embed(std::slice::from_ref(sentence))?;
                let noise = model.noise(1, frames, &mut rng);
                let v = model.generate(&raw, &noise, mode)?;
                out.extend(VideoClip::from_batch(&v, std::slice::from_ref(sentence))?);
            }
            Ok(out)
        }
    }
}

/// Clips generated from `α·e(a) + (1−α)·e(b)` for `steps` evenly spaced α
/// from 1 down to 0, all with the noise of stream 0 of `seed`.
pub fn smooth_transition(
    model: &Model,
    a: &str,
    b: &str,
    steps: usize,
    frames: usize,
    seed: u64,
    mode: NormMode,
) -> Result<Vec<VideoClip>> {
    if steps < 2 {
        return Err(Error::Contract(format!("smooth transition needs at least 2 steps, got {steps}")));
    }
    let codes = |s: &str| -> Result<Tensor> {
        let raw = model.embed(&[s])?;
        match mode {
            NormMode::Running => model.sentence_codes(&raw, mode),
            NormMode::Batch => Err(Error::Contract("smooth transition requires running statistics".into())),
        }
    };
    let (ea, eb) = (codes(a)?, codes(b)?);
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = 1.0 - i as f32 / (steps - 1) as f32;
        let code = ea.zip_map(&eb, |x, y| alpha * x + (1.0 - alpha) * y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let noise = model.noise(1, frames, &mut rng);
        let v = model.generate_from_codes(&code, &noise, mode)?;
        out.extend(VideoClip::from_batch(&v, &[format!("alpha={alpha}")])?);
    }
    Ok(out)
}

/// Mean absolute pixel difference between two clips.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len().max(1) as f64
}

/// The evaluation report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid_all: f64,
    pub fid_intra: BTreeMap<String, f64>,
    pub fid_intra_mean: Option<f64>,
    pub r_precision: f64,
    pub accuracy: f64,
    pub config: RunConfig,
    pub seed: u64,
}

/// Report plus the quantities needed to judge it.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub related_counts: Vec<usize>,
}

/// Frozen classifier and retrieval network for a dataset.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub classifier: EvalClassifier,
    pub retrieval: RetrievalNet,
    pub classes: Vec<String>,
    pub frames: usize,
    pub classifier_fit: FitSummary,
    pub retrieval_fit: FitSummary,
}

/// Real clips and their classifier outputs.
#[derive(Clone, Debug)]
pub struct RealSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Evaluator {
    /// Trains both networks on `ds`. Check [`Evaluator::reliable`] before
    /// trusting the result.
    pub fn train(ds: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let t = cfg.eval.frames;
        let (classifier, classifier_fit) = fit_classifier(ds, &cfg.eval.classifier, t, cfg.seed)?;
        let provider = EmbeddingProvider::from_config(&cfg.model.embedding, cfg.model.d_raw)?;
        let (retrieval, retrieval_fit) = train_retrieval_net(ds, &cfg.eval.retrieval, provider, t, cfg.seed)?;
        Ok(Self {
            classifier,
            retrieval,
            classes: ds.manifest.classes.clone(),
            frames: t,
            classifier_fit,
            retrieval_fit,
        })
    }

    /// Fails unless the classifier beat twice chance on its training data.
    pub fn reliable(&self) -> Result<()> {
        check_reliable(self.classifier_fit.accuracy, self.classes.len())
    }

    fn cache_key(ds: &Dataset, cfg: &RunConfig) -> serde_json::Value {
        json!({
            "classes": ds.manifest.classes,
            "clips": ds.len(),
            "data_seed": ds.manifest.seed,
            "resolution": ds.manifest.resolution,
            "seed": cfg.seed,
            "frames": cfg.eval.frames,
            "classifier": cfg.eval.classifier,
            "retrieval": cfg.eval.retrieval,
            "embedding": cfg.model.embedding,
            "d_raw": cfg.model.d_raw,
        })
    }

    pub fn save(&self, dir: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<()> {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for store in [&self.classifier.store, &self.retrieval.store] {
            owned.extend(store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = json!({
            "key": Self::cache_key(ds, cfg),
            "classifier_fit": self.classifier_fit,
            "retrieval_fit": self.retrieval_fit,
        });
        nta::write(dir, 0, "", &refs, meta)
    }

    /// Loads a cached evaluator if it was trained for the same dataset and
    /// settings.
    pub fn load_cached(dir: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<Option<Self>> {
        if !dir.join(nta::MANIFEST).exists() {
            return Ok(None);
        }
        let a = nta::read(dir)?;
        if a.meta.get("key") != Some(&Self::cache_key(ds, cfg)) {
            return Ok(None);
        }
        let t = cfg.eval.frames;
        let mut classifier = EvalClassifier::new(&cfg.eval.classifier, ds.manifest.resolution, ds.num_classes(), cfg.seed)?;
        let provider = EmbeddingProvider::from_config(&cfg.model.embedding, cfg.model.d_raw)?;
        let mut retrieval = RetrievalNet::new(&cfg.eval.retrieval, ds.manifest.resolution, provider, cfg.seed)?;
        for store in [&mut classifier.store, &mut retrieval.store] {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let p = store.get_mut(id);
                let v = a.get(&p.name).ok_or_else(|| Error::Integrity {
                    name: p.name.clone(),
                    detail: "missing from evaluator cache".into(),
                })?;
                p.value = v.clone();
            }
        }
        let fit = |k: &str| serde_json::from_value(a.meta[k].clone()).map_err(Error::from);
        Ok(Some(Self {
            classifier,
            retrieval,
            classes: ds.manifest.classes.clone(),
            frames: t,
            classifier_fit: fit("classifier_fit")?,
            retrieval_fit: fit("retrieval_fit")?,
        }))
    }

    /// Loads from `dir` when possible, otherwise trains and caches.
    pub fn load_or_train(dir: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<Self> {
        if let Some(e) = Self::load_cached(dir, ds, cfg)? {
            info!("loaded evaluator from {}", dir.display());
            return Ok(e);
        }
        let e = Self::train(ds, cfg)?;
        e.save(dir, ds, cfg)?;
        Ok(e)
    }

    /// Classifier features of `n` random real windows drawn without
    /// replacement (cycling through the dataset if `n` exceeds it).
    pub fn real_set(&self, ds: &Dataset, n: usize, rng: &mut impl Rng) -> Result<RealSet> {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(rng);
        let picks: Vec<usize> = order.iter().copied().cycle().take(n).collect();
        let batch = assemble(ds, &windows(ds, &picks, self.frames, rng)?, self.frames)?;
        let (features, _) = self.classifier.features_probs(&batch.videos)?;
        Ok(RealSet {
            features,
            labels: batch.labels,
        })
    }

    /// Fréchet distance between two halves of all real clips.
    pub fn real_split_fid(&self, ds: &Dataset, rng: &mut impl Rng) -> Result<f64> {
        let all = self.real_set(ds, ds.len(), rng)?;
        let n = all.labels.len();
        let a: Vec<usize> = (0..n).step_by(2).collect();
        let b: Vec<usize> = (1..n).step_by(2).collect();
        frechet_distance(
            &GaussianStats::from_features(&all.features.select_rows(&a))?,
            &GaussianStats::from_features(&all.features.select_rows(&b))?,
        )
    }

    /// Scores `model` against `real`. Prompts cycle through the classes;
    /// generation uses batch statistics in chunks of the training batch size.
    pub fn evaluate(&self, model: &Model, real: &RealSet, cfg: &RunConfig, seed: u64) -> Result<EvalOutcome> {
        let e = &cfg.eval;
        let k = self.classes.len();
        let chunk = cfg.train.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);

        let labels: Vec<usize> = (0..e.num_generated).map(|i| i % k).collect();
        let prompts: Vec<String> = labels.iter().map(|&l| self.classes[l].clone()).collect();
        let videos = generate_batch(model, &prompts, self.frames, chunk, &mut rng)?;
        let (features, probs) = self.classifier.features_probs(&videos)?;
        let (is_mean, is_std) = inception_score(&probs, e.is_splits)?;
        let fid_all = frechet_distance(
            &GaussianStats::from_features(&real.features)?,
            &GaussianStats::from_features(&features)?,
        )?;
        let intra = intra_class_fid(
            &group_rows(&real.features, &real.labels, &self.classes)?,
            &group_rows(&features, &labels, &self.classes)?,
        )?;
        let predicted: Vec<usize> = (0..probs.shape()[0]).map(|i| argmax(probs.row(i))).collect();
        let accuracy = command_accuracy(&predicted, &labels);

        let mut queries = Vec::with_capacity(e.num_queries);
        for q in 0..e.num_queries {
            let class = q % k;
            let spec = class_spec_of(&self.classes[class])
                .ok_or_else(|| Error::Data(format!("class caption {:?} is not canonical", self.classes[class])))?;
            queries.push(build_query(&spec, class, e, &mut rng)?);
        }
        let q_prompts: Vec<String> = queries.iter().map(|q| q.sentence.clone()).collect();
        let q_videos = generate_batch(model, &q_prompts, self.frames, chunk, &mut rng)?;
        let q_vectors = self.retrieval.video_embeddings(&q_videos)?;
        let mut total = 0.0;
        for (i, q) in queries.iter().enumerate() {
            let s = self.retrieval.sentence_embeddings(&q.pool)?;
            total += r_precision_score(&self.retrieval.similarities(q_vectors.row(i), &s), &q.related)?;
        }
        let r_precision = if queries.is_empty() { 0.0 } else { total / queries.len() as f64 };
        let related_counts: Vec<usize> = queries.iter().map(RetrievalQuery::num_related).collect();
        let (baseline_mean, baseline_std) = if related_counts.is_empty() {
            (0.0, 0.0)
        } else {
            random_baseline(&related_counts, e.pool_size, e.baseline_reps, &mut rng)
        };

        Ok(EvalOutcome {
            report: EvalReport {
                is_mean,
                is_std,
                fid_all,
                fid_intra: intra.per_class,
                fid_intra_mean: intra.mean,
                r_precision,
                accuracy,
                config: cfg.clone(),
                seed,
            },
            baseline_mean,
            baseline_std,
            related_counts,
        })
    }
}
