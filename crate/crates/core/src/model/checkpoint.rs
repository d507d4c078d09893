//! Binary checkpoints: magic, version, a JSON header describing every
//! array, then the arrays as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{numel, DenseArray, Rng};

const MAGIC: &[u8; 8] = b"PDEFMCKP";
const VERSION: u32 = 1;

/// AdamW moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Updates received by each parameter (bias correction is per parameter).
    pub counts: BTreeMap<String, u64>,
    pub m: BTreeMap<String, DenseArray>,
    pub v: BTreeMap<String, DenseArray>,
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Training progress stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub best_val: Option<f64>,
    /// Validation loss of every completed epoch.
    #[serde(default)]
    pub val_history: Vec<f64>,
    #[serde(default)]
    pub train_history: Vec<f64>,
    /// Learning rate at the end of every completed epoch.
    #[serde(default)]
    pub lr_history: Vec<f64>,
    /// Next shard-plan epoch of each dataset stream.
    #[serde(default)]
    pub stream_epochs: Vec<u64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Free-form provenance such as the fine-tuning level.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Option<OptimState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<ParamGroup>,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    step: u64,
    #[serde(default)]
    counts: BTreeMap<String, u64>,
    m: Vec<BlobRef>,
    v: Vec<BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<BlobRef>,
    optim: Option<OptimHeader>,
    meta: CheckpointMeta,
}

struct Blobs(Vec<f64>);

impl Blobs {
    fn push(&mut self, name: &str, a: &DenseArray) -> BlobRef {
        let offset = self.0.len();
        self.0.extend_from_slice(a.data());
        BlobRef { name: name.to_string(), shape: a.shape().to_vec(), offset, trainable: None, group: None }
    }

    fn take(&self, r: &BlobRef) -> Result<DenseArray> {
        let n = numel(&r.shape);
        let end = r.offset.checked_add(n).filter(|&e| e <= self.0.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("array {} runs past the end of the file", r.name)))?;
        DenseArray::new(r.shape.clone(), self.0[r.offset..end].to_vec())
    }
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, model: &Model, optim: Option<&OptimState>, meta: &CheckpointMeta) -> Result<()> {
    let mut blobs = Blobs(Vec::new());
    let params = model
        .params()
        .iter()
        .map(|(name, e)| BlobRef { trainable: Some(e.trainable), group: Some(e.group), ..blobs.push(name, &e.value) })
        .collect();
    let optim = optim.map(|o| OptimHeader {
        step: o.step,
        counts: o.counts.clone(),
        m: o.m.iter().map(|(n, a)| blobs.push(n, a)).collect(),
        v: o.v.iter().map(|(n, a)| blobs.push(n, a)).collect(),
    });
    let header = Header { config: model.config().clone(), params, optim, meta: meta.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * blobs.0.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &blobs.0 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(format!("header: {e}")))?;
    let rest = &bytes[body..];
    if rest.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values".into()));
    }
    let blobs = Blobs(rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
    let mut store = ParamStore::new();
    for r in &header.params {
        let group = r.group.ok_or_else(|| bad(format!("parameter {} has no group", r.name)))?;
        store.insert(&r.name, blobs.take(r)?, group);
        store.set_trainable(&r.name, r.trainable.unwrap_or(true))?;
    }
    let model = Model::from_params(header.config, store)?;
    let optim = match header.optim {
        None => None,
        Some(o) => {
            let read = |list: &[BlobRef]| -> Result<BTreeMap<String, DenseArray>> {
                list.iter().map(|r| Ok((r.name.clone(), blobs.take(r)?))).collect()
            };
            Some(OptimState { step: o.step, counts: o.counts, m: read(&o.m)?, v: read(&o.v)? })
        }
    };
    Ok(Checkpoint { model, optim, meta: header.meta })
}
