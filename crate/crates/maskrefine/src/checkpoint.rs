//! Single-file checkpoint. All integers and reals are little-endian.
//!
//! ```text
//! magic      4 bytes  "QMRS"
//! version    u32
//! length     u64      total file length in bytes, header included
//! config     u32 byte count, then the config as JSON
//! epoch      i64      best epoch, -1 when untrained
//! best_iou   f64      validation refined IoU of that epoch
//! count      u32      number of tensors
//! tensor     u16 name length, UTF-8 name, u8 rank, u32 × rank extents,
//!            f32 × numel values
//! ```

use std::fs;
use std::path::Path;

use maskrefine_core::model::ModelParams;
use maskrefine_core::numcore::Tensor;
use maskrefine_core::Config;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QMRS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Full run configuration; its model section describes `params`.
    pub config: Config,
    pub params: ModelParams,
    pub epoch: Option<usize>,
    pub best_val_iou: f64,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.config.model != ckpt.params.config {
        return Err(Error::Format("config snapshot does not describe the parameters".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&ckpt.epoch.map_or(-1i64, |e| e as i64).to_le_bytes());
    out.extend_from_slice(&ckpt.best_val_iou.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.store.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.store.iter() {
        let name = name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let len = out.len() as u64;
    out[8..16].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("record at byte {} runs past the end of the file", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { found: String::from_utf8_lossy(&bytes[..4]).into_owned() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion { found: version, expected: VERSION });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if declared != bytes.len() as u64 {
        if declared > bytes.len() as u64 {
            return Err(Error::Truncated { expected: declared, actual: bytes.len() as u64 });
        }
        return Err(Error::Format(format!("header declares {declared} bytes but {} are present", bytes.len())));
    }

    let mut r = Reader { buf: bytes, pos: HEADER_LEN };
    let config_len = r.u32()? as usize;
    let config: Config = serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let epoch = i64::from_le_bytes(r.array()?);
    let best_val_iou = f64::from_le_bytes(r.array()?);
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| Error::Format(format!("tensor name: {e}")))?.to_owned();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the tensor table", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_named(&config.model, tensors)?;
    let epoch = if epoch < 0 { None } else { Some(epoch as usize) };
    Ok(Checkpoint { config, params, epoch, best_val_iou })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
