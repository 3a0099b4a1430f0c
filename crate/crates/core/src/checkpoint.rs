//! Versioned parameter container.
//!
//! Layout: the 8-byte magic `RIVIDCK\0`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (configs, identity map,
//! stage provenance and a tensor table), then the raw little-endian tensor
//! data in table order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_atomic, IdentityMap};
use crate::error::{Error, Result};
use crate::ffsr::FfsrConfig;
use crate::nn::{ParamKind, ParamStore, Real};
use crate::rife::RifeConfig;

pub const MAGIC: &[u8; 8] = b"RIVIDCK\0";
pub const VERSION: u32 = 1;

/// One completed training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Weight,
    WeightNoDecay,
    Buffer,
}

impl From<ParamKind> for KindTag {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Weight { decay: true } => KindTag::Weight,
            ParamKind::Weight { decay: false } => KindTag::WeightNoDecay,
            ParamKind::Buffer => KindTag::Buffer,
        }
    }
}

impl From<KindTag> for ParamKind {
    fn from(k: KindTag) -> Self {
        match k {
            KindTag::Weight => ParamKind::Weight { decay: true },
            KindTag::WeightNoDecay => ParamKind::Weight { decay: false },
            KindTag::Buffer => ParamKind::Buffer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: KindTag,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    ffsr: Option<FfsrConfig>,
    rife: Option<RifeConfig>,
    identities: Option<IdentityMap>,
    provenance: Vec<StageRecord>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub ffsr: Option<FfsrConfig>,
    pub rife: Option<RifeConfig>,
    pub identities: Option<IdentityMap>,
    pub provenance: Vec<StageRecord>,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        for (id, name, value) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind: self.store.kind(id).into(),
                dtype: f32::DTYPE.to_string(),
                shape: value.shape().to_vec(),
                offset: data.len() as u64,
            });
            for &v in value.iter() {
                v.write_le(&mut data);
            }
        }
        let header = Header {
            ffsr: self.ffsr.clone(),
            rife: self.rife.clone(),
            identities: self.identities.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).unwrap_or_default();
        if hlen > body.len() {
            return Err(fail("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        let mut store = ParamStore::new();
        let mut expected = 0u64;
        for t in &header.tensors {
            if t.dtype != f32::DTYPE {
                return Err(fail(format!("tensor `{}` has unsupported dtype {}", t.name, t.dtype)));
            }
            let len: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start + len * f32::BYTES;
            if t.offset != expected || end > data.len() {
                return Err(fail(format!("tensor `{}` lies outside the data section", t.name)));
            }
            expected = end as u64;
            if store.find(&t.name).is_some() {
                return Err(fail(format!("duplicate tensor `{}`", t.name)));
            }
            let vals = data[start..end].chunks_exact(f32::BYTES).map(f32::read_le).collect();
            store.add(&t.name, ArrayD::from_shape_vec(IxDyn(&t.shape), vals).unwrap(), t.kind.into());
        }
        if expected as usize != data.len() {
            return Err(fail("trailing bytes after the last tensor".into()));
        }
        Ok(Self {
            ffsr: header.ffsr,
            rife: header.rife,
            identities: header.identities.map(IdentityMap::rebuilt),
            provenance: header.provenance,
            store,
        })
    }

    /// Atomic write.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Trainable scalars of the stored networks (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.store.weight_count()
    }
}
