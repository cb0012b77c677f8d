//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"SPKW"      4 bytes
//! version u32         4 bytes
//! manifest_len u64    8 bytes
//! manifest            manifest_len bytes of JSON
//! payload             f64 little-endian values
//! ```
//!
//! The manifest lists sections (`backbone`, `heads`), each a list of
//! tensors with path, shape, payload offset (in values) and a SHA-256 of
//! the tensor's bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::heads::{HeadSet, LinearHead, TrainingMeta};
use crate::math::Matrix;

const MAGIC: &[u8; 4] = b"SPKW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub backbone_digest: String,
    pub sections: BTreeMap<String, Vec<TensorEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads_meta: Option<TrainingMeta>,
}

fn bytes_of(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[derive(Default)]
struct Builder {
    sections: BTreeMap<String, Vec<TensorEntry>>,
    payload: Vec<f64>,
}

impl Builder {
    fn add(&mut self, section: &str, path: String, shape: Vec<usize>, data: &[f64]) {
        self.sections.entry(section.into()).or_default().push(TensorEntry {
            path,
            shape,
            offset: self.payload.len(),
            checksum: sha256_hex(&bytes_of(data)),
        });
        self.payload.extend_from_slice(data);
    }
}

/// Serializes the backbone and, if given, the intermediate heads.
pub fn write_container<W: Write>(mut out: W, backbone: &Backbone, heads: Option<&HeadSet>) -> Result<()> {
    let mut b = Builder::default();
    for p in backbone.parameters() {
        b.add("backbone", p.path, p.shape, p.data);
    }
    if let Some(heads) = heads {
        // Keep the section present even when only the shared head exists.
        b.sections.entry("heads".into()).or_default();
        for (layer, head) in heads.intermediate() {
            b.add("heads", format!("heads.{layer}.weight"), vec![head.weight.rows, head.weight.cols], &head.weight.data);
            b.add("heads", format!("heads.{layer}.bias"), vec![head.bias.len()], &head.bias);
        }
    }
    let manifest = Manifest {
        config: backbone.config().clone(),
        backbone_digest: backbone.digest().to_string(),
        sections: b.sections,
        heads_meta: heads.map(|h| h.meta.clone()),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    out.write_all(&bytes_of(&b.payload))?;
    Ok(())
}

pub struct Loaded {
    pub backbone: Backbone,
    pub heads: Option<HeadSet>,
    pub manifest: Manifest,
}

fn read_tensors(entries: &[TensorEntry], payload: &[f64]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let len: usize = e.shape.iter().product();
        let data = payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Container(format!("tensor {} runs past the payload", e.path)))?
            .to_vec();
        if sha256_hex(&bytes_of(&data)) != e.checksum {
            return Err(Error::Container(format!("checksum mismatch for {}", e.path)));
        }
        out.insert(e.path.clone(), data);
    }
    Ok(out)
}

pub fn read_container<R: Read>(mut input: R) -> Result<Loaded> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(Error::Container(format!("unsupported version {}", u32::from_le_bytes(word))));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut manifest_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Container("payload is not a whole number of f64 values".into()));
    }
    let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let backbone_entries = manifest
        .sections
        .get("backbone")
        .ok_or_else(|| Error::Container("missing backbone section".into()))?;
    let backbone = Backbone::from_parameters(manifest.config.clone(), read_tensors(backbone_entries, &payload)?)?;
    if backbone.digest() != manifest.backbone_digest {
        return Err(Error::Container("backbone digest does not match manifest".into()));
    }

    let heads = match manifest.sections.get("heads") {
        None => None,
        Some(entries) => {
            let mut tensors = read_tensors(entries, &payload)?;
            let (v, d) = (manifest.config.vocab_size(), manifest.config.hidden_dim);
            let mut heads = BTreeMap::new();
            let layers: Vec<usize> = entries
                .iter()
                .filter_map(|e| e.path.strip_prefix("heads.")?.strip_suffix(".weight")?.parse().ok())
                .collect();
            for layer in layers {
                let weight = tensors.remove(&format!("heads.{layer}.weight")).unwrap();
                let bias = tensors
                    .remove(&format!("heads.{layer}.bias"))
                    .ok_or_else(|| Error::Container(format!("head {layer} has no bias")))?;
                if weight.len() != v * d {
                    return Err(Error::Container(format!("head {layer} has wrong shape")));
                }
                heads.insert(layer, LinearHead { weight: Matrix::new(v, d, weight), bias });
            }
            Some(HeadSet::from_parts(&backbone, heads, manifest.heads_meta.clone().unwrap_or_default())?)
        }
    };
    Ok(Loaded { backbone, heads, manifest })
}

pub fn save(path: &Path, backbone: &Backbone, heads: Option<&HeadSet>) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, backbone, heads)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    read_container(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> Backbone {
        Backbone::new(ModelConfig {
            num_layers: 3,
            hidden_dim: 8,
            num_heads: 2,
            text_vocab_size: 4,
            speech_vocab_size: 6,
            max_seq_len: 16,
            ..ModelConfig::toy()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_with_heads() {
        let b = small();
        let mut heads = HeadSet::warm_start(&b, &BTreeSet::from([1, 2]));
        heads.meta.steps = 3;
        let mut buf = Vec::new();
        write_container(&mut buf, &b, Some(&heads)).unwrap();
        let loaded = read_container(buf.as_slice()).unwrap();
        assert_eq!(loaded.backbone.digest(), b.digest());
        assert_eq!(loaded.heads.unwrap(), heads);
        assert_eq!(loaded.manifest.sections["backbone"].len(), b.parameters().len());
    }

    #[test]
    fn corruption_is_detected() {
        let b = small();
        let mut buf = Vec::new();
        write_container(&mut buf, &b, None).unwrap();
        let last = buf.len() - 1;
        buf[last] ^= 0x40;
        let err = read_container(buf.as_slice()).err().unwrap();
        assert!(err.to_string().contains("checksum"));
        assert!(read_container(&b"NOPE0000"[..]).is_err());
    }
}
