//! Sentence codes: a raw-embedding provider followed by a trainable
//! projection head producing the 256-dimensional `e(S)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use pathvid_nn::{BatchNorm, Builder, Dense, Session, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Width of the projected sentence code.
pub const TEXT_DIM: usize = 256;

/// A sentence with its normalized tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: tokenize(text),
        }
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; spreads FNV's weak high bits.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing of tokens into `dim` buckets.
#[derive(Clone, Debug)]
pub struct HashedBow {
    pub dim: usize,
}

impl HashedBow {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Bucket and sign assigned to one token.
    pub fn token_bucket(&self, token: &str) -> (usize, f32) {
        let h = mix(fnv1a(token.as_bytes()));
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    /// Unnormalized signed bucket sums.
    pub fn counts(&self, tokens: &[String]) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for t in tokens {
            let (b, s) = self.token_bucket(t);
            v[b] += s;
        }
        v
    }

    pub fn embed(&self, sentence: &Sentence) -> Vec<f32> {
        let mut v = self.counts(&sentence.tokens);
        let mut norm = l2(&v);
        if norm == 0.0 && !sentence.tokens.is_empty() {
            // opposite signs cancelled exactly; fall back to unsigned counts
            v.iter_mut().for_each(|x| *x = 0.0);
            for t in &sentence.tokens {
                v[self.token_bucket(t).0] += 1.0;
            }
            norm = l2(&v);
        }
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
}

/// Exact-match lookup of precomputed vectors, optionally falling back to
/// hashing for sentences not in the table.
#[derive(Clone, Debug)]
pub struct TableProvider {
    pub dim: usize,
    pub table: HashMap<String, Vec<f32>>,
    pub fallback: Option<HashedBow>,
}

impl TableProvider {
    pub fn load(path: &Path, fallback: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        let table = parse_table(&text)?;
        let dim = table.values().next().map(Vec::len).unwrap_or(0);
        Ok(Self {
            dim,
            fallback: fallback.then(|| HashedBow::new(dim)),
            table,
        })
    }
}

/// Parses `<sentence>\t<floats>` lines; later duplicates replace earlier ones.
pub fn parse_table(text: &str) -> Result<HashMap<String, Vec<f32>>> {
    let mut table = HashMap::new();
    let mut dim = None;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (sentence, floats) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Data(format!("embedding table line {}: missing tab", ln + 1)))?;
        let v = floats
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::Data(format!("embedding table line {}: {e}", ln + 1)))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("embedding table line {}: non-finite value", ln + 1)));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::Data(format!(
                    "embedding table line {}: {} values, expected {d}",
                    ln + 1,
                    v.len()
                )))
            }
            _ => {}
        }
        if table.insert(sentence.to_string(), v).is_some() {
            warn!("embedding table: duplicate sentence {sentence:?}, keeping the last entry");
        }
    }
    Ok(table)
}

/// Writes a table in the format read by [`parse_table`]. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_embedding_table<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<()> {
    let mut out = String::new();
    for (sentence, v) in rows {
        if sentence.contains('\t') || sentence.contains('\n') {
            return Err(Error::Data(format!("sentence {sentence:?} contains a tab or newline")));
        }
        out.push_str(sentence);
        out.push('\t');
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{x:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    std::fs::write(path, out).ctx(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    Hashed(HashedBow),
    Table(TableProvider),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// "hashed" or "table".
    pub provider: String,
    pub table_path: Option<String>,
    pub fallback_to_hashed: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: "hashed".into(),
            table_path: None,
            fallback_to_hashed: false,
        }
    }
}

impl EmbeddingProvider {
    pub fn from_config(cfg: &EmbeddingConfig, d_raw: usize) -> Result<Self> {
        match cfg.provider.as_str() {
            "hashed" => Ok(Self::Hashed(HashedBow::new(d_raw))),
            "table" => {
                let path = cfg
                    .table_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("table provider needs model.embedding.table_path".into()))?;
                let t = TableProvider::load(Path::new(path), cfg.fallback_to_hashed)?;
                if t.dim != d_raw {
                    return Err(Error::Config(format!("embedding table has width {}, model expects {d_raw}", t.dim)));
                }
                Ok(Self::Table(t))
            }
            other => Err(Error::Config(format!("unknown embedding provider {other:?}"))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hashed(h) => h.dim,
            Self::Table(t) => t.dim,
        }
    }

    pub fn embed(&self, sentence: &Sentence) -> Result<Vec<f32>> {
        match self {
            Self::Hashed(h) => Ok(h.embed(sentence)),
            Self::Table(t) => match (t.table.get(sentence.text.trim()), &t.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(h)) => Ok(h.embed(sentence)),
                (None, None) => Err(Error::MissingEmbedding(sentence.text.clone())),
            },
        }
    }

    /// Raw embeddings of a batch as `[B, d_raw]`.
    pub fn embed_batch<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(sentences.len() * self.dim());
        for s in sentences {
            data.extend(self.embed(&Sentence::new(s.as_ref()))?);
        }
        Ok(Tensor::new(vec![sentences.len(), self.dim()], data)?)
    }
}

/// `dense → BN → LeakyReLU → dense → BN → LeakyReLU`, raw width to 256.
#[derive(Clone, Debug)]
pub struct TextHead {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub slope: f32,
}

impl TextHead {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, d_raw: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: b.dense("fc1", d_raw, hidden, false)?,
            bn1: b.batch_norm("bn1", hidden)?,
            fc2: b.dense("fc2", hidden, TEXT_DIM, false)?,
            bn2: b.batch_norm("bn2", TEXT_DIM)?,
            slope: LEAKY_SLOPE,
        })
    }

    /// `[B, d_raw] → [B, 256]`.
    pub fn forward(&self, s: &mut Session, raw: Var) -> Result<Var> {
        let h = self.fc1.forward(s, raw)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.leaky_relu(h, self.slope);
        let h = self.fc2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        Ok(s.graph.leaky_relu(h, self.slope))
    }
}
