//! Self-describing little-endian named-tensor archive.
//!
//! ```text
//! "VITLCKPT"  u32 version
//! u32 config_len, config JSON
//! u64 step, u64 seed, f64 loss
//! u32 count, then per tensor:
//!     u16 name_len, name, u8 dtype (0 = f32, 1 = f64), u8 ndim, ndim × u64 dims, payload
//! u64 FNV-1a checksum of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::nn::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"VITLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (StoredTensor::F32(a), StoredTensor::F32(b)) => a.bit_eq(b),
            (StoredTensor::F64(a), StoredTensor::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the experiment/model config that produced the tensors.
    pub config: serde_json::Value,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, StoredTensor)>,
}

/// How to reconcile checkpoint tensors with a model's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Name sets must match exactly.
    Strict,
    /// Tensors the model does not have (decoder, mask token, …) are dropped
    /// with a notice; model parameters absent from the file keep their values.
    Partial,
}

impl Checkpoint {
    pub fn from_store<T: Element>(config: serde_json::Value, meta: CheckpointMeta, stores: &[(&str, &ParamStore<T>)]) -> Self {
        let mut tensors = Vec::new();
        for (prefix, store) in stores {
            for p in store.iter() {
                let name = if prefix.is_empty() {
                    p.name.clone()
                } else {
                    format!("{prefix}.{}", p.name)
                };
                tensors.push((name, StoredTensor::from_tensor(&p.value)));
            }
        }
        Self { config, meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Copies tensors under `prefix` (empty for none) into `store`. Returns
    /// the number of parameters loaded.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>, prefix: &str, mode: LoadMode) -> CkResult<usize> {
        let strip = |name: &str| -> Option<String> {
            if prefix.is_empty() {
                Some(name.to_string())
            } else {
                name.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('.'))
                    .map(str::to_string)
            }
        };
        let mut loaded = 0;
        let mut dropped = Vec::new();
        for (name, t) in &self.tensors {
            let Some(local) = strip(name) else {
                dropped.push(name.as_str());
                continue;
            };
            match store.get_mut(&local) {
                Some(slot) => {
                    if slot.shape() != t.shape() {
                        return Err(CheckpointError::Mismatch(format!(
                            "{name}: stored shape {:?}, model expects {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t.to();
                    loaded += 1;
                }
                None => dropped.push(name.as_str()),
            }
        }
        match mode {
            LoadMode::Strict => {
                if let Some(name) = dropped.first() {
                    return Err(CheckpointError::Mismatch(format!("unknown tensor {name}")));
                }
                if loaded != store.len() {
                    let missing: Vec<&str> = store
                        .iter()
                        .map(|p| p.name.as_str())
                        .filter(|n| {
                            let full = if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
                            self.get(&full).is_none()
                        })
                        .collect();
                    return Err(CheckpointError::Mismatch(format!("missing tensors {missing:?}")));
                }
            }
            LoadMode::Partial => {
                if !dropped.is_empty() {
                    log::info!(
                        "checkpoint: dropped {} tensor(s) not used by this model (e.g. {})",
                        dropped.len(),
                        dropped[0]
                    );
                }
            }
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> CkResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.meta.step.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.loss.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(CheckpointError::Corrupt(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated("magic")
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = u32::from_le_bytes(r.take::<4>("version")?);
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let cfg_len = u32::from_le_bytes(r.take::<4>("config length")?) as usize;
        let cfg = r.slice(cfg_len, "config")?;
        let config = serde_json::from_slice(cfg).map_err(|e| CheckpointError::Corrupt(format!("config echo: {e}")))?;
        let meta = CheckpointMeta {
            step: u64::from_le_bytes(r.take::<8>("metadata")?),
            seed: u64::from_le_bytes(r.take::<8>("metadata")?),
            loss: f64::from_le_bytes(r.take::<8>("metadata")?),
        };
        let count = u32::from_le_bytes(r.take::<4>("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take::<2>("tensor name")?) as usize;
            let name = std::str::from_utf8(r.slice(nlen, "tensor name")?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let [code] = r.take::<1>("tensor header")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: unknown dtype code {code}")))?;
            let [ndim] = r.take::<1>("tensor header")?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take::<8>("tensor shape")?);
                if d == 0 || d > usize::MAX as u64 {
                    return Err(CheckpointError::Corrupt(format!("{name}: invalid extent {d}")));
                }
                shape.push(d as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflows")))?;
            let nbytes = numel
                .checked_mul(dtype.size_of())
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflows")))?;
            let payload = r.slice(nbytes, "tensor payload")?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(decode(shape, payload)?),
                DType::F64 => StoredTensor::F64(decode(shape, payload)?),
            };
            tensors.push((name, t));
        }
        let body_end = r.pos;
        let stored = u64::from_le_bytes(r.take::<8>("checksum")?);
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if stored != fnv1a(&bytes[..body_end]) {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self { config, meta, tensors })
    }
}

fn decode<T: Element>(shape: Vec<usize>, payload: &[u8]) -> CkResult<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize, what: &'static str) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self, what: &'static str) -> CkResult<[u8; N]> {
        Ok(self.slice(N, what)?.try_into().expect("length checked"))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// write never leaves a partial checkpoint at `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CkResult<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load_checkpoint(path: &Path) -> CkResult<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
