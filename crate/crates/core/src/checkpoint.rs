//! Binary parameter snapshots.
//!
//! Layout: 8-byte magic, `u32` version, `u64`-length-prefixed UTF-8 metadata
//! (`key\tvalue` lines), `u64` array count, then per array a length-prefixed
//! name, `u32` rank, `u64` dims and little-endian `f32` data. A CRC32 of
//! everything before it closes the file. All integers are little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::dataset::Catalog;
use crate::error::{Error, Result};
use crate::model::{DualEncoder, Generator, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRSFUSE\x01";
pub const VERSION: u32 = 1;
pub const DUAL_ENCODER: &str = "dual-encoder";
pub const GENERATOR: &str = "generator";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    /// Free-form settings; the model shape keys are filled in by the
    /// constructors below.
    pub metadata: IndexMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

fn model_metadata(cfg: &ModelConfig) -> IndexMap<String, String> {
    let mut m = IndexMap::new();
    m.insert("dim".into(), cfg.dim.to_string());
    m.insert("layers".into(), cfg.layers.to_string());
    m.insert("heads".into(), cfg.heads.to_string());
    m.insert("max_items".into(), cfg.max_items.to_string());
    m.insert("max_attributes".into(), cfg.max_attributes.to_string());
    m.insert("dropout".into(), cfg.dropout.to_string());
    m
}

impl Checkpoint {
    pub fn from_store(
        component: &str,
        store: &ParamStore,
        metadata: IndexMap<String, String>,
    ) -> Self {
        Self {
            component: component.to_string(),
            metadata,
            arrays: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_dual_encoder(model: &DualEncoder) -> Self {
        Self::from_store(DUAL_ENCODER, &model.store, model_metadata(&model.config))
    }

    pub fn from_generator(model: &Generator) -> Self {
        Self::from_store(GENERATOR, &model.store, model_metadata(&model.config))
    }

    pub fn expect_component(&self, expected: &str) -> Result<()> {
        if self.component != expected {
            return Err(Error::Component {
                expected: expected.into(),
                found: self.component.clone(),
            });
        }
        Ok(())
    }

    /// Model shape recorded in the metadata.
    pub fn model_config(&self) -> Result<ModelConfig> {
        fn field<T: std::str::FromStr>(c: &Checkpoint, k: &str) -> Result<T> {
            c.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::ParamMismatch(format!("metadata lacks a valid `{k}`")))
        }
        Ok(ModelConfig {
            dim: field(self, "dim")?,
            layers: field(self, "layers")?,
            heads: field(self, "heads")?,
            max_items: field(self, "max_items")?,
            max_attributes: field(self, "max_attributes")?,
            dropout: field(self, "dropout")?,
        })
    }

    /// Copies every array into `store`; names and shapes must match one to
    /// one.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {} arrays, model has {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for (name, t) in &self.arrays {
            let id = store
                .find(name)
                .ok_or_else(|| Error::ParamMismatch(format!("model has no parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds a dual encoder of `config`'s shape for `catalog` and loads
    /// the stored parameters into it.
    pub fn to_dual_encoder(&self, config: &ModelConfig, catalog: &Catalog) -> Result<DualEncoder> {
        self.expect_component(DUAL_ENCODER)?;
        let mut m = DualEncoder::new(config.clone(), catalog, &mut rng::seeded(0))?;
        self.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn to_generator(&self, item_vocab: usize) -> Result<Generator> {
        self.expect_component(GENERATOR)?;
        let mut m = Generator::new(self.model_config()?, item_vocab, &mut rng::seeded(0))?;
        self.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = format!("component\t{}\n", self.component);
        for (k, v) in &self.metadata {
            meta.push_str(&format!("{k}\t{v}\n"));
        }
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated
            } else {
                Error::BadMagic
            });
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        // checksum before trusting any lengths further in
        if bytes.len() < r.pos + 4 {
            return Err(Error::Truncated);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        r.bytes = body;

        let meta = String::from_utf8(r.bytes_prefixed()?.to_vec())
            .map_err(|_| Error::ParamMismatch("metadata is not UTF-8".into()))?;
        let mut component = None;
        let mut metadata = IndexMap::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('\t').unwrap_or((line, ""));
            if k == "component" {
                component = Some(v.to_string());
            } else {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let component =
            component.ok_or_else(|| Error::ParamMismatch("no component name".into()))?;

        let count = r.u64()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes_prefixed()?.to_vec())
                .map_err(|_| Error::ParamMismatch("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(Error::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != r.bytes.len() {
            return Err(Error::ParamMismatch(
                "trailing bytes after the last array".into(),
            ));
        }
        Ok(Self {
            component,
            metadata,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}
