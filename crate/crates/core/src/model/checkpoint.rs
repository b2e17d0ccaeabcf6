//! Binary container shared by model checkpoints and importance maps.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PSHF"
//! 4       2     format version (u16) = 1
//! 6       1     kind (u8): 1 = model checkpoint, 2 = importance map
//! 7       1     reserved, 0
//! 8       32    SHA-256 of the config JSON bytes below
//! 40      4     config JSON length n (u32), followed by n bytes of JSON
//! ..      4     meta JSON length m (u32), followed by m bytes of JSON
//! ..      4     record count (u32)
//! per record:
//!         2     name length k (u16), followed by k bytes of UTF-8
//!         1     ndim (u8), followed by ndim dims (u32 each)
//!         8·N   payload: N = product(dims) raw f64 values
//! end     32    SHA-256 of every preceding byte
//! ```
//!
//! The embedded config hash is what ties a map or checkpoint to a model
//! configuration; loaders verify it along with the trailing digest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex_digest, LoraAdapter, ModelConfig, TransformerLM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PSHF";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Model = 1,
    ImportanceMap = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&Sha256::digest(&config));
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            let n = name.as_bytes();
            if n.len() > u16::MAX as usize || t.ndim() > u8::MAX as usize {
                return Err(Error::Contract(format!("record `{name}` cannot be encoded")));
            }
            out.extend_from_slice(&(n.len() as u16).to_le_bytes());
            out.extend_from_slice(n);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 + 32 {
            return Err(Error::Integrity("container truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("container digest mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported container version {version}")));
        }
        let kind = match r.take(1)?[0] {
            1 => ContainerKind::Model,
            2 => ContainerKind::ImportanceMap,
            k => return Err(Error::Integrity(format!("unknown container kind {k}"))),
        };
        r.take(1)?;
        let config_hash = r.take(32)?.to_vec();
        let n = r.u32()? as usize;
        let config_bytes = r.take(n)?;
        if Sha256::digest(config_bytes).as_slice() != config_hash.as_slice() {
            return Err(Error::Integrity("embedded config hash mismatch".into()));
        }
        let config: ModelConfig = serde_json::from_slice(config_bytes)?;
        let m = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(m)?)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let k = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(k)?.to_vec())
                .map_err(|_| Error::Integrity("record name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("record `{name}`: {e}")))?;
            records.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after last record".into()));
        }
        Ok(Self {
            kind,
            config,
            meta,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Integrity("container truncated".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    target: String,
    rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct ModelMeta {
    adapters: Vec<AdapterMeta>,
}

impl TransformerLM {
    pub fn to_container(&self) -> Container {
        let mut records: Vec<(String, Tensor)> = self
            .names()
            .iter()
            .zip(self.params())
            .map(|(n, p)| (n.clone(), p.clone().with_requires_grad(false)))
            .collect();
        let mut meta = ModelMeta::default();
        for ad in self.adapters() {
            records.push((format!("lora.{}.a", ad.target), ad.a.clone()));
            records.push((format!("lora.{}.b", ad.target), ad.b.clone()));
            meta.adapters.push(AdapterMeta {
                target: ad.target.clone(),
                rank: ad.rank,
                alpha: ad.alpha,
            });
        }
        for (_, t) in &mut records {
            t.zero_grad();
        }
        Container {
            kind: ContainerKind::Model,
            config: self.config().clone(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            records,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::Model {
            return Err(Error::Integrity("container is not a model checkpoint".into()));
        }
        let meta: ModelMeta = serde_json::from_value(c.meta)?;
        let n_base = c.records.len() - 2 * meta.adapters.len().min(c.records.len() / 2);
        let mut records = c.records;
        let lora_records = records.split_off(n_base);
        let (names, params): (Vec<String>, Vec<Tensor>) = records.into_iter().unzip();
        let mut model = Self::from_parts(c.config, names, params)?;
        let mut adapters = Vec::new();
        for (am, pair) in meta.adapters.into_iter().zip(lora_records.chunks_exact(2)) {
            if pair[0].0 != format!("lora.{}.a", am.target) || pair[1].0 != format!("lora.{}.b", am.target) {
                return Err(Error::Integrity(format!("adapter records for `{}` out of order", am.target)));
            }
            adapters.push(LoraAdapter {
                target: am.target,
                a: pair[0].1.clone(),
                b: pair[1].1.clone(),
                rank: am.rank,
                alpha: am.alpha,
            });
        }
        model.set_adapters(adapters)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn checkpoint_hash(&self) -> String {
        hex_digest(&self.to_container().encode().expect("checkpoint encodes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_LORA_TARGETS;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 8,
            feature_dim: 4,
            seed: 5,
        }
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let m = TransformerLM::new(&cfg()).unwrap();
        let bytes = m.to_container().encode().unwrap();
        let back = TransformerLM::from_container(Container::decode(&bytes).unwrap()).unwrap();
        assert!(back.same_weights(&m));
        assert_eq!(back.to_container().encode().unwrap(), bytes);
    }

    #[test]
    fn adapters_survive_roundtrip() {
        let mut m = TransformerLM::new(&cfg()).unwrap();
        m.attach_lora(DEFAULT_LORA_TARGETS, 2, 4.0, 1).unwrap();
        let bytes = m.to_container().encode().unwrap();
        let back = TransformerLM::from_container(Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.adapters(), m.adapters());
        assert_eq!(back.num_trainable(), m.num_trainable());
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = TransformerLM::new(&cfg()).unwrap().to_container().encode().unwrap();
        for cut in [0, 10, 100, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Container::decode(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn registry_mismatch_is_rejected() {
        let mut c = TransformerLM::new(&cfg()).unwrap().to_container();
        c.config.d_ff = 16;
        assert!(matches!(TransformerLM::from_container(c), Err(Error::Integrity(_))));
    }
}
