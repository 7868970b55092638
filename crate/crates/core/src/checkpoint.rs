//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GDIF" | u32 version | u64 header_len | header (JSON, header_len bytes) | f32 payload
//! ```
//!
//! The header holds `meta` (configurations, step, rng position, loss
//! window) and a `tensors` table listing every stored tensor with its shape and
//! its offset (in f32 elements) into the payload. Model parameters are stored
//! under their own names, optimizer moments under `opt.m/` and `opt.v/`, and
//! averaged weights under `ema/`.

use std::path::Path;

use glyphdiff_substrate::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningMode;
use crate::denoiser::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GDIF";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";
const EMA_PREFIX: &str = "ema/";

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: String| Error::format("checkpoint rng", m);
        let bytes = hex::decode(&self.seed).map_err(|e| bad(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| bad("seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| bad(format!("word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub conditioning: ConditioningMode,
    pub step: u64,
    pub rng: RngState,
    pub loss_window: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredHeader {
    meta: CheckpointHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
    pub adam_m: Option<ParamSet<f32>>,
    pub adam_v: Option<ParamSet<f32>>,
    pub ema: Option<ParamSet<f32>>,
}

impl Checkpoint {
    /// Weights to sample with: the averaged ones when present.
    pub fn sampling_params(&self) -> &ParamSet<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    fn sections(&self) -> Vec<(&'static str, &ParamSet<f32>)> {
        let mut out = vec![("", &self.params)];
        if let Some(m) = &self.adam_m {
            out.push((M_PREFIX, m));
        }
        if let Some(v) = &self.adam_v {
            out.push((V_PREFIX, v));
        }
        if let Some(e) = &self.ema {
            out.push((EMA_PREFIX, e));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (prefix, set) in self.sections() {
            for (name, t) in set.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&StoredHeader {
            meta: self.header.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let bad = |m: String| Error::format(context, m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let de = &mut serde_json::Deserializer::from_slice(&bytes[16..hend]);
        let stored: StoredHeader = serde_path_to_error::deserialize(de)
            .map_err(|e| bad(format!("header at `{}`: {}", e.path(), e.inner())))?;
        let payload = &bytes[hend..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values".into()));
        }
        let n_values = payload.len() / 4;

        let mut sets: [ParamSet<f32>; 4] = Default::default();
        let mut expected = 0;
        for e in &stored.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + numel > n_values {
                return Err(bad(format!(
                    "tensor `{}` has inconsistent offset {}",
                    e.name, e.offset
                )));
            }
            expected += numel;
            let data = payload[e.offset * 4..(e.offset + numel) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
            let (slot, name) = [(1, M_PREFIX), (2, V_PREFIX), (3, EMA_PREFIX)]
                .iter()
                .find_map(|&(i, p)| e.name.strip_prefix(p).map(|n| (i, n)))
                .unwrap_or((0, e.name.as_str()));
            sets[slot]
                .insert(name, t)
                .map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
        }
        if expected != n_values {
            return Err(bad(format!(
                "payload has {n_values} values, table covers {expected}"
            )));
        }
        let [params, m, v, ema] = sets;
        let opt = |s: ParamSet<f32>| -> Result<Option<ParamSet<f32>>> {
            if s.is_empty() {
                return Ok(None);
            }
            if s.len() != params.len()
                || s.iter()
                    .zip(params.iter())
                    .any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
            {
                return Err(bad("auxiliary tensors do not match the parameters".into()));
            }
            Ok(Some(s))
        };
        let (adam_m, adam_v, ema) = (opt(m)?, opt(v)?, opt(ema)?);
        Ok(Self {
            header: stored.meta,
            params,
            adam_m,
            adam_v,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
