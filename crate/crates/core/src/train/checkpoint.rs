//! `VKC1` checkpoints: magic, version u32, u32-length JSON config block,
//! u32-count parameter table of (u32 name length, name, tensor), then the
//! optimizer step u64 and a u32-count table of (name, m, v). Little-endian
//! throughout; tensors use the `.vkt` framing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{decode_tensor, encode_tensor, TypedTensor};
use crate::error::{Error, Result};
use crate::net::{MedVkan, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VKC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32("name length")?;
        let bytes = self.take(n, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::InvalidArgument("parameter name is not UTF-8".into()))
    }

    fn tensor<T: TypedTensor>(&mut self) -> Result<Tensor<T>> {
        let (t, used) = decode_tensor(&self.buf[self.pos..])?;
        self.pos += used;
        t.into_typed()
    }
}

impl<T: Scalar + TypedTensor> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&ConfigBlock {
            model: self.model.clone(),
            train: self.train.clone(),
        })?;
        put_u32(&mut out, config.len())?;
        out.extend_from_slice(&config);

        put_u32(&mut out, self.params.len())?;
        for id in self.params.ids() {
            put_name(&mut out, self.params.name(id))?;
            encode_tensor(self.params.value(id), &mut out)?;
        }

        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let slots: Vec<_> = self
            .params
            .ids()
            .filter_map(|id| {
                let i = id.index();
                match (&self.optimizer.m[i], &self.optimizer.v[i]) {
                    (Some(m), Some(v)) => Some((self.params.name(id), m, v)),
                    _ => None,
                }
            })
            .collect();
        put_u32(&mut out, slots.len())?;
        for (name, m, v) in slots {
            put_name(&mut out, name)?;
            encode_tensor(m, &mut out)?;
            encode_tensor(v, &mut out)?;
        }
        Ok(out)
    }

    /// Parses a checkpoint and rebuilds the model it describes. Every
    /// parameter of the model must be present and no unknown names may
    /// appear.
    pub fn from_bytes(buf: &[u8]) -> Result<(MedVkan, Self)> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let n = r.u32("config length")?;
        let block: ConfigBlock = serde_json::from_slice(r.take(n, "config")?)?;
        block.train.validate()?;
        let (model, mut params) = MedVkan::init::<T>(&block.model, 0)?;

        let count = r.u32("parameter count")?;
        let mut seen = vec![false; params.len()];
        for _ in 0..count {
            let name = r.name()?;
            let id = params.find(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            params.set(id, r.tensor()?)?;
            seen[id.index()] = true;
        }
        if let Some(missing) = params.ids().find(|id| !seen[id.index()]) {
            return Err(Error::InvalidArgument(format!("checkpoint lacks parameter {:?}", params.name(missing))));
        }

        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = r.u64("optimizer step")?;
        for _ in 0..r.u32("optimizer slot count")? {
            let name = r.name()?;
            let id = params.find(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let (m, v) = (r.tensor::<T>()?, r.tensor::<T>()?);
            let shape = params.value(id).shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::shape("checkpoint", format!("optimizer moments of {name} do not match {shape:?}")));
            }
            optimizer.m[id.index()] = Some(m);
            optimizer.v[id.index()] = Some(v);
        }
        if r.pos != buf.len() {
            return Err(Error::InvalidArgument(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            model: block.model,
            train: block.train,
            params,
            optimizer,
        };
        Ok((model, ckpt))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(MedVkan, Self)> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
