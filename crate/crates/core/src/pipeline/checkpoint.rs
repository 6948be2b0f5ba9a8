//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `EATCKPT1`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then the data section. The
//! header holds the metadata and a table of contents of named arrays (name,
//! dtype, shape, byte offset into the data section, byte length). Arrays are
//! little-endian `f64`, stored in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::frontend::NormStats;
use crate::numerics::{ParamSet, Tensor};

use super::config::TrainConfig;
use super::manifest::TaskKind;

pub const MAGIC: &[u8; 8] = b"EATCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const EMA: &str = "ema/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed training steps. Together with `config.seed` this is the full
    /// random state, since every stream is keyed by seed and step.
    pub step: u64,
    pub optimizer_step: u64,
    pub teacher_forwards: u64,
    pub config: TrainConfig,
    pub norm: NormStats,
    /// Class names in head order; empty before fine-tuning.
    pub vocabulary: Vec<String>,
    pub task: Option<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TocEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TocEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    /// EMA teacher, with its `teacher.` prefixed names.
    pub teacher: ParamSet,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    fn arrays(&self) -> BTreeMap<String, &Tensor> {
        let mut all = BTreeMap::new();
        for (n, t) in self.params.iter() {
            all.insert(format!("{PARAM}{n}"), t);
        }
        for (n, t) in self.teacher.iter() {
            all.insert(format!("{EMA}{n}"), t);
        }
        for (n, t) in &self.adam_m {
            all.insert(format!("{ADAM_M}{n}"), t);
        }
        for (n, t) in &self.adam_v {
            all.insert(format!("{ADAM_V}{n}"), t);
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let mut tensors = Vec::with_capacity(arrays.len());
        let mut offset = 0u64;
        for (name, t) in &arrays {
            let length = 8 * t.numel() as u64;
            tensors.push(TocEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors,
        })
        .map_err(|e| EatError::Invalid(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| EatError::Data(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start]).map_err(|e| bad(e.to_string()))?;
        let data = &bytes[data_start..];
        let mut ckpt = Checkpoint {
            meta: header.meta,
            params: ParamSet::new(),
            teacher: ParamSet::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
            if e.length as usize != 8 * numel || end > data.len() {
                return Err(bad(format!("`{}` has an inconsistent extent", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, values)?;
            if let Some(n) = e.name.strip_prefix(PARAM) {
                ckpt.params.insert(n, t);
            } else if let Some(n) = e.name.strip_prefix(EMA) {
                ckpt.teacher.insert(n, t);
            } else if let Some(n) = e.name.strip_prefix(ADAM_M) {
                ckpt.adam_m.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(ADAM_V) {
                ckpt.adam_v.insert(n.to_string(), t);
            } else {
                return Err(bad(format!("unknown array group in `{}`", e.name)));
            }
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| EatError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| EatError::io(&tmp, e))?;
        f.sync_all().map_err(|e| EatError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| EatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EatError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            EatError::Data(msg) => EatError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
