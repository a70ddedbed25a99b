//! NTA tensor archives: a directory holding `manifest.json` and one raw
//! little-endian `f32` file per tensor, each guarded by its length and CRC-32.

use std::fs;
use std::path::Path;

use pathvid_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub rng_state: String,
    pub entries: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

/// Contents of an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub step: u64,
    pub rng_state: String,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Value,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}.bin")
}

/// Writes `tensors` under `dir` (created if missing). The manifest is
/// written last.
pub fn write(dir: &Path, step: u64, rng_state: &str, tensors: &[(&str, &Tensor)], meta: Value) -> Result<()> {
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (i, (name, t)) in tensors.iter().enumerate() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = file_name(i, name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).ctx(|| format!("writing {}", path.display()))?;
        entries.push(Entry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            file,
            byte_length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        rng_state: rng_state.to_string(),
        entries,
        meta,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").ctx(|| format!("writing {}", path.display()))
}

/// Reads and verifies an archive.
pub fn read(dir: &Path) -> Result<Archive> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::Integrity {
        name: mpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Integrity {
        name: mpath.display().to_string(),
        detail: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity {
            name: mpath.display().to_string(),
            detail: format!("format_version {} (expected {FORMAT_VERSION})", manifest.format_version),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let fail = |detail: String| Error::Integrity { name: e.name.clone(), detail };
        if e.dtype != "f32" {
            return Err(fail(format!("unsupported dtype {:?}", e.dtype)));
        }
        let bytes = fs::read(dir.join(&e.file)).map_err(|err| fail(format!("{}: {err}", e.file)))?;
        let expected = e.shape.iter().product::<usize>() * 4;
        if bytes.len() as u64 != e.byte_length || bytes.len() != expected {
            return Err(fail(format!(
                "{} bytes on disk, manifest says {}, shape {:?} needs {expected}",
                bytes.len(),
                e.byte_length,
                e.shape
            )));
        }
        let crc = crc32fast::hash(&bytes);
        if crc != e.crc32 {
            return Err(fail(format!("crc32 {crc:08x} does not match manifest {:08x}", e.crc32)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| fail(err.to_string()))?;
        tensors.push((e.name.clone(), t));
    }
    Ok(Archive {
        step: manifest.step,
        rng_state: manifest.rng_state,
        tensors,
        meta: manifest.meta,
    })
}

/// Seed, stream and word position of a ChaCha8 generator as hex.
pub fn rng_to_hex(rng: &ChaCha8Rng) -> String {
    let mut bytes = rng.get_seed().to_vec();
    bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    hex::encode(bytes)
}

pub fn rng_from_hex(text: &str) -> Result<ChaCha8Rng> {
    let bad = |detail: String| Error::Integrity { name: "rng_state".into(), detail };
    let bytes = hex::decode(text).map_err(|e| bad(e.to_string()))?;
    if bytes.len() != 56 {
        return Err(bad(format!("{} bytes, expected 56", bytes.len())));
    }
    let seed: [u8; 32] = bytes[..32].try_into().expect("length checked");
    let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("length checked"));
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().expect("length checked"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}
