//! Versioned binary checkpoints.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "MBRT"
//! version      u32      currently 1
//! config       u32 length + UTF-8 flat key=value model config
//! step         u64
//! base_seed    u64      seed all RNG streams derive from
//! tensors      u32 count, then per tensor:
//!                u16 name length + name bytes
//!                u8  dtype (0 = f32, 1 = f64)
//!                u8  rank, then rank * u32 dims
//!                raw little-endian payload
//! optimizer    u8 present flag; when 1:
//!                u64 t; f64 beta1, beta2, eps, weight_decay, base_lr
//!                first-moment tensor block (same encoding as above)
//!                second-moment tensor block
//! ```
//!
//! Save, load, save again is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamParams, AdamState};
use crate::tensor::{Dtype, DtypeKind, Tensor};

const MAGIC: &[u8; 4] = b"MBRT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub hp: AdamParams,
    pub base_lr: f64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub base_seed: u64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Snapshot live parameters by name.
    pub fn from_params<T: Dtype>(
        config: ModelConfig,
        step: u64,
        base_seed: u64,
        params: &[(String, Tensor<T>)],
        optimizer: Option<(&AdamState<T>, f64)>,
    ) -> Self {
        let grab = |t: &Tensor<T>| match T::KIND {
            DtypeKind::F32 => TensorData::F32(t.data().iter().map(|&v| v.f64() as f32).collect()),
            DtypeKind::F64 => TensorData::F64(t.data().iter().map(|&v| v.f64()).collect()),
        };
        let tensors = params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: grab(t),
            })
            .collect();
        let optimizer = optimizer.map(|(state, base_lr)| {
            let moments = |buf: &Vec<Vec<T>>| {
                params
                    .iter()
                    .zip(buf)
                    .map(|((name, t), m)| NamedTensor {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        data: match T::KIND {
                            DtypeKind::F32 => {
                                TensorData::F32(m.iter().map(|&v| v.f64() as f32).collect())
                            }
                            DtypeKind::F64 => TensorData::F64(m.iter().map(|&v| v.f64()).collect()),
                        },
                    })
                    .collect()
            };
            OptimizerSnapshot {
                t: state.t,
                hp: state.hp,
                base_lr,
                m: moments(&state.m),
                v: moments(&state.v),
            }
        });
        Checkpoint {
            version: FORMAT_VERSION,
            config,
            step,
            base_seed,
            tensors,
            optimizer,
        }
    }

    /// Copy stored tensors back into live parameters, matching by name and
    /// validating shapes.
    pub fn restore_params<T: Dtype>(&self, params: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, p) in params {
            let stored = self.tensor(name).ok_or_else(|| Error::CheckpointShape {
                name: name.clone(),
                found: vec![],
                expected: p.shape().to_vec(),
            })?;
            if stored.shape != p.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: stored.shape.clone(),
                    expected: p.shape().to_vec(),
                });
            }
            let data: Vec<T> = match &stored.data {
                TensorData::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
                TensorData::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
            };
            p.set_data(&data)?;
        }
        Ok(())
    }

    /// Rebuild optimizer moments aligned with `params`.
    pub fn restore_optimizer<T: Dtype>(
        &self,
        params: &[(String, Tensor<T>)],
    ) -> Result<Option<AdamState<T>>> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let restore = |buf: &[NamedTensor]| -> Result<Vec<Vec<T>>> {
            params
                .iter()
                .map(|(name, p)| {
                    let stored = buf
                        .iter()
                        .find(|t| &t.name == name)
                        .ok_or_else(|| Error::CheckpointShape {
                            name: name.clone(),
                            found: vec![],
                            expected: p.shape().to_vec(),
                        })?;
                    if stored.shape != p.shape() {
                        return Err(Error::CheckpointShape {
                            name: name.clone(),
                            found: stored.shape.clone(),
                            expected: p.shape().to_vec(),
                        });
                    }
                    Ok(match &stored.data {
                        TensorData::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
                        TensorData::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
                    })
                })
                .collect()
        };
        Ok(Some(AdamState {
            t: snap.t,
            hp: snap.hp,
            m: restore(&snap.m)?,
            v: restore(&snap.v)?,
        }))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &NamedTensor) {
        let name = t.name.as_bytes();
        self.u16(name.len() as u16);
        self.bytes(name);
        match &t.data {
            TensorData::F32(_) => self.u8(DtypeKind::F32.tag()),
            TensorData::F64(_) => self.u8(DtypeKind::F64.tag()),
        }
        self.u8(t.shape.len() as u8);
        for &d in &t.shape {
            self.u32(d as u32);
        }
        match &t.data {
            TensorData::F32(v) => {
                for x in v {
                    self.bytes(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    self.bytes(&x.to_le_bytes());
                }
            }
        }
    }

    fn tensor_block(&mut self, ts: &[NamedTensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                reading: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let name_len = self.u16("tensor name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::CheckpointTruncated {
                reading: "tensor name (invalid utf-8)".into(),
            })?;
        let dtype = self.u8("tensor dtype")?;
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            0 => {
                let raw = self.take(numel * 4, &format!("payload of {}", name))?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = self.take(numel * 8, &format!("payload of {}", name))?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => {
                return Err(Error::CheckpointTruncated {
                    reading: format!("tensor {}: unknown dtype tag {}", name, other),
                })
            }
        };
        Ok(NamedTensor { name, shape, data })
    }

    fn tensor_block(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32("tensor count")? as usize;
        (0..count).map(|_| self.tensor()).collect()
    }
}

/// Encode a bare named-tensor directory (shared with the feature cache).
pub fn encode_tensor_block(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut w = Writer::new();
    w.tensor_block(tensors);
    w.buf
}

pub fn decode_tensor_block(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.tensor_block()
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(ckpt.version);
    let cfg = ckpt.config.to_flat();
    w.u32(cfg.len() as u32);
    w.bytes(cfg.as_bytes());
    w.u64(ckpt.step);
    w.u64(ckpt.base_seed);
    w.tensor_block(&ckpt.tensors);
    match &ckpt.optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            w.u64(opt.t);
            w.f64(opt.hp.beta1);
            w.f64(opt.hp.beta2);
            w.f64(opt.hp.eps);
            w.f64(opt.hp.weight_decay);
            w.f64(opt.base_lr);
            w.tensor_block(&opt.m);
            w.tensor_block(&opt.v);
        }
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len, "config block")?.to_vec())
        .map_err(|_| Error::CheckpointTruncated {
            reading: "config block (invalid utf-8)".into(),
        })?;
    let config = ModelConfig::from_flat(&cfg_text)?;
    let step = r.u64("step")?;
    let base_seed = r.u64("base_seed")?;
    let tensors = r.tensor_block()?;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        _ => {
            let t = r.u64("optimizer step")?;
            let hp = AdamParams {
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
                weight_decay: r.f64("weight_decay")?,
            };
            let base_lr = r.f64("base_lr")?;
            let m = r.tensor_block()?;
            let v = r.tensor_block()?;
            Some(OptimizerSnapshot {
                t,
                hp,
                base_lr,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        version,
        config,
        step,
        base_seed,
        tensors,
        optimizer,
    })
}

/// Atomic save: write to a temp file in the same directory, then rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::new(1, 8, 2, 16, 16).unwrap();
        Checkpoint {
            version: FORMAT_VERSION,
            config: cfg,
            step: 42,
            base_seed: 7,
            tensors: vec![
                NamedTensor {
                    name: "embeddings.token".into(),
                    shape: vec![2, 3],
                    data: TensorData::F32(vec![1.5, -2.25, 0.0, 3.5, f32::MIN_POSITIVE, -0.0]),
                },
                NamedTensor {
                    name: "layer0.attn.bq".into(),
                    shape: vec![3],
                    data: TensorData::F32(vec![0.1, 0.2, 0.3]),
                },
            ],
            optimizer: Some(OptimizerSnapshot {
                t: 42,
                hp: AdamParams::default(),
                base_lr: 1e-4,
                m: vec![NamedTensor {
                    name: "embeddings.token".into(),
                    shape: vec![2, 3],
                    data: TensorData::F32(vec![0.0; 6]),
                }],
                v: vec![NamedTensor {
                    name: "embeddings.token".into(),
                    shape: vec![2, 3],
                    data: TensorData::F32(vec![0.0; 6]),
                }],
            }),
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let ckpt = sample();
        let bytes = encode(&ckpt);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        // save -> load -> save produces byte-identical files
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::CheckpointMagic)));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_file_is_detected() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode(cut),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn restore_checks_shapes_against_params() {
        let ckpt = sample();
        let good = Tensor::<f32>::param(vec![2, 3], vec![0.0; 6]).unwrap();
        let params = vec![("embeddings.token".to_string(), good.clone())];
        ckpt.restore_params(&params).unwrap();
        assert_eq!(good.to_vec()[0], 1.5);

        let bad = Tensor::<f32>::param(vec![3, 2], vec![0.0; 6]).unwrap();
        let params = vec![("embeddings.token".to_string(), bad)];
        assert!(matches!(
            ckpt.restore_params(&params),
            Err(Error::CheckpointShape { .. })
        ));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }
}
