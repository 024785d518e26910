//! Binary checkpoint: magic, header length, JSON header, raw f64 blobs.
//!
//! ```text
//! "STGNRDE1" | u64 LE header length | JSON header | little-endian f64 data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{write_atomic, Normalizer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STGNRDE1";
pub const FORMAT_VERSION: u32 = 1;
const SUPPORT: &str = "graph.support";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    run: Option<RunConfig>,
    normalizer: Option<Normalizer>,
    tensors: Vec<Entry>,
}

/// A model plus what is needed to rebuild its inputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub run: Option<RunConfig>,
    pub normalizer: Option<Normalizer>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(&str, &Tensor)> = self.model.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if let Some(s) = &self.model.support {
            tensors.push((SUPPORT, s));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            entries.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * 8;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            run: self.run.clone(),
            normalizer: self.normalizer.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Load("missing STGNRDE1 magic bytes".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Load("header length exceeds file size".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Load(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported format version {}", header.format_version)));
        }
        let data = &bytes[16 + len..];
        let mut params = BTreeMap::new();
        let mut support = None;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let blob = e
                .offset
                .checked_add(n * 8)
                .and_then(|end| data.get(e.offset..end))
                .ok_or_else(|| Error::Load(format!("tensor '{}' runs past the end of the file", e.name)))?;
            let values = blob
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), values).map_err(|err| Error::Load(format!("tensor '{}': {err}", e.name)))?;
            if e.name == SUPPORT {
                support = Some(t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let model = Model::from_parts(header.config, ParamStore::from_map(params), support)?;
        Ok(Checkpoint {
            model,
            run: header.run,
            normalizer: header.normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = Model::new(ModelConfig::default(), 4).unwrap();
        let ck = Checkpoint {
            model,
            run: Some(RunConfig::default()),
            normalizer: Some(Normalizer {
                mean: vec![1.5],
                std: vec![0.25],
            }),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.run, ck.run);
        assert_eq!(back.normalizer, ck.normalizer);
    }

    #[test]
    fn corrupt_magic_and_shape_mismatch() {
        let ck = Checkpoint {
            model: Model::new(ModelConfig::default(), 4).unwrap(),
            run: None,
            normalizer: None,
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Load(_))));

        let mut wrong = ck.clone();
        let mut cfg = wrong.model.config.clone();
        cfg.dim_h = 16;
        wrong.model.config = cfg;
        let bytes = wrong.to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
