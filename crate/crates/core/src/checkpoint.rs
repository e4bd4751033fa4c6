//! The `WFCK` checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "WFCK"
//! u32     version (1)
//! u32     tensor count
//! per tensor:
//!   u16   name length, then UTF-8 name
//!   u8    dtype (0 = f32)
//!   u8    rank, then rank x u32 extents
//!   f32   payload, product(extents) values
//! u32     metadata length, then UTF-8 JSON
//! ```
//!
//! Parsing validates the whole file before returning anything.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WFCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub epoch: u64,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: CheckpointMeta,
}

/// Which parameters [`load_into`] transfers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadScope {
    All,
    BackboneOnly,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, metadata: CheckpointMeta) -> Self {
        Checkpoint {
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.cast::<f32>()))
                .collect(),
            metadata,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Validation(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Validation(format!("tensor {name} rank too large")))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&u32_len(e, "extent")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| Error::Validation(format!("metadata: {e}")))?;
        out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected \"WFCK\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u16("name length")? as usize;
            let raw = r.take(len, "tensor name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| Error::Format {
                    offset: name_at + 2,
                    reason: format!("tensor name is not UTF-8: {e}"),
                })?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Format {
                    offset: name_at,
                    reason: format!("duplicate tensor name {name}"),
                });
            }
            let dtype_at = r.pos;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    offset: dtype_at,
                    reason: format!("unsupported dtype {dtype} for {name}"),
                });
            }
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(Error::Format {
                    offset: rank_at,
                    reason: format!("tensor {name} has rank 0"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let e = r.u32("extent")? as usize;
                if e == 0 {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("tensor {name} has a zero extent"),
                    });
                }
                shape.push(e);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format {
                    offset: rank_at,
                    reason: format!("tensor {name} shape {shape:?} overflows"),
                })?;
            let payload = r.take(numel, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: rank_at,
                reason: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta_raw = r.take(meta_len, "metadata")?;
        let metadata: CheckpointMeta =
            serde_json::from_slice(meta_raw).map_err(|e| Error::Format {
                offset: meta_at,
                reason: format!("metadata JSON: {e}"),
            })?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { tensors, metadata })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("{what} {n} exceeds u32")))
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
            None => Err(Error::Format {
                offset: self.pos,
                reason: format!(
                    "truncated: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `model` atomically: a sibling temp file is renamed into place.
pub fn save<T: Scalar>(model: &Model<T>, metadata: CheckpointMeta, path: &Path) -> Result<()> {
    write_checkpoint(&Checkpoint::from_model(model, metadata), path)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::storage(path, e)
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Copies checkpoint tensors into `model`. With [`LoadScope::BackboneOnly`]
/// head parameters keep their current values. Every targeted parameter
/// must be present with a matching shape; otherwise nothing is written.
pub fn load_into<T: Scalar>(
    mut model: Model<T>,
    ckpt: &Checkpoint,
    scope: LoadScope,
) -> Result<Model<T>> {
    let targets: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .filter(|p| scope == LoadScope::All || model.is_backbone_param(&p.name))
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    if scope == LoadScope::BackboneOnly && targets.is_empty() {
        return Err(Error::Transfer {
            reason: "model has no backbone parameters".into(),
            names: vec![model.spec().name.clone()],
        });
    }
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for (name, shape) in &targets {
        match ckpt.get(name) {
            None => missing.push(name.clone()),
            Some(t) if t.shape() != shape.as_slice() => mismatched.push(format!(
                "{name} (model {shape:?}, checkpoint {:?})",
                t.shape()
            )),
            Some(_) => {}
        }
    }
    if scope == LoadScope::All {
        let wanted: HashSet<&str> = targets.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<String> = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| !wanted.contains(n.as_str()))
            .map(|(n, _)| format!("{n} (not in model)"))
            .collect();
        mismatched.extend(extra);
    }
    if !missing.is_empty() {
        return Err(Error::Transfer {
            reason: "checkpoint lacks tensors".into(),
            names: missing,
        });
    }
    if !mismatched.is_empty() {
        return Err(Error::Transfer {
            reason: "checkpoint tensors do not match the model".into(),
            names: mismatched,
        });
    }
    for (name, _) in targets {
        let t = ckpt.get(&name).expect("presence checked");
        model.set_param(&name, t.cast())?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model_id: "vgg7".into(),
            epoch: 3,
            seed: 42,
            config_digest: "abc".into(),
        }
    }

    #[test]
    fn header_magic() {
        let ck = Checkpoint {
            tensors: vec![("w".into(), Tensor::zeros(vec![1]).unwrap())],
            metadata: meta(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"WFCK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn version_mismatch() {
        let ck = Checkpoint {
            tensors: vec![],
            metadata: meta(),
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let ck = Checkpoint {
            tensors: vec![("a".into(), Tensor::from_fn(vec![2, 3], |i| i as f32).unwrap())],
            metadata: meta(),
        };
        let bytes = ck.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_metadata_key_rejected() {
        let ck = Checkpoint {
            tensors: vec![],
            metadata: meta(),
        };
        let mut bytes = ck.to_bytes().unwrap();
        let json = br#"{"model_id":"x","epoch":0,"seed":0,"config_digest":"","extra":1}"#;
        bytes.truncate(12);
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(json);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 16, .. })));
    }
}
