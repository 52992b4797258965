//! Named-tensor checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HEFT" | version u32 | config_len u32 | config JSON
//!        | count u32 | count × (name_len u32 | name | rank u32 | rank × u64 dim | f64 data)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::reft::{LoreftParams, ReftConfig, B_NAME, R_NAME, W_NAME};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HEFT";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Embedded config record, kept as parsed JSON.
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode_checkpoint<'a>(
    config: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let config_bytes = serde_json::to_vec(config)?;
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut out = Vec::with_capacity(
        16 + config_bytes.len() + tensors.iter().map(|(_, t)| t.len() * 8 + 64).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_len(&mut out, config_bytes.len())?;
    out.extend_from_slice(&config_bytes);
    put_len(&mut out, tensors.len())?;
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n =
        u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a checkpoint. Sizes are checked against the remaining input
/// before anything is allocated.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let config_len = r.u32("config length")? as usize;
    let config: serde_json::Value = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::Format(format!("config record: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?)
                .map_err(|_| Error::Format("dimension overflow".into()))?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            shape.push(d);
        }
        let byte_len = elems
            .checked_mul(8)
            .filter(|&b| b <= r.remaining())
            .ok_or_else(|| Error::Format(format!("truncated tensor table at `{name}`")))?;
        let data = r
            .take(byte_len, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint<'a>(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(config, tensors)?)
}

/// Write-then-rename, so an interrupted save never leaves a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Config record of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: ModelConfig,
    #[serde(default)]
    pub intervention: Option<ReftConfig>,
    /// Training history of the weights, if any.
    #[serde(default)]
    pub lora_epochs: usize,
    #[serde(default)]
    pub reft_epochs: usize,
}

/// Base (or merged) weights plus an optional intervention.
#[derive(Clone, Debug)]
pub struct ModelArtifact {
    pub weights: ModelWeights,
    pub intervention: Option<(ReftConfig, LoreftParams)>,
    pub lora_epochs: usize,
    pub reft_epochs: usize,
}

impl ModelArtifact {
    pub fn base(weights: ModelWeights) -> Self {
        Self {
            weights,
            intervention: None,
            lora_epochs: 0,
            reft_epochs: 0,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let record = ModelRecord {
            model: self.weights.config().clone(),
            intervention: self.intervention.as_ref().map(|(c, _)| c.clone()),
            lora_epochs: self.lora_epochs,
            reft_epochs: self.reft_epochs,
        };
        let extra = self
            .intervention
            .as_ref()
            .map(|(_, p)| p.named_tensors())
            .unwrap_or_default();
        encode_checkpoint(
            &serde_json::to_value(record)?,
            self.weights
                .iter()
                .chain(extra.iter().map(|(n, t)| (n.as_str(), t))),
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(decode_checkpoint(bytes)?)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let record: ModelRecord = serde_json::from_value(ckpt.config)
            .map_err(|e| Error::Format(format!("config record: {e}")))?;
        let mut tensors = ckpt.tensors;
        let intervention = match record.intervention {
            Some(cfg) => {
                let mut own = BTreeMap::new();
                for n in [R_NAME, W_NAME, B_NAME] {
                    if let Some(t) = tensors.remove(n) {
                        own.insert(n.to_string(), t);
                    }
                }
                let params = LoreftParams::from_named(&own)?;
                Some((cfg, params))
            }
            None => None,
        };
        let weights = ModelWeights::from_tensors(record.model, tensors)?;
        if let Some((cfg, params)) = &intervention {
            crate::reft::attach_intervention(&weights, cfg.clone(), params.clone())?;
        }
        Ok(Self {
            weights,
            intervention,
            lora_epochs: record.lora_epochs,
            reft_epochs: record.reft_epochs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
