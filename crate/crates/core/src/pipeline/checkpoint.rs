//! `SPSN1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SPSN1"
//! u32 config length, config as canonical JSON
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, rank x u32 dims, f32 payload
//! u64 FNV-1a hash of every preceding byte
//! ```
//!
//! Loading parses and validates the whole file before anything is returned,
//! so a rejected file never yields partial state.

use std::path::Path;

use super::config::Config;
use super::model::Spsn;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SPSN1";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Param(format!("{v} does not fit a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(cfg: &Config, store: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let text = cfg.canonical();
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, store.len())?;
    for (name, p) in store.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = fnv1a(&buf);
    buf.extend_from_slice(&hash.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, cfg: &Config, store: &ParamStore) -> Result<()> {
    let bytes = encode(cfg, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // Write to a sibling file first so a crash never leaves a half-written
    // checkpoint under the final name.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
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
            None => Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint image into its config and raw parameters.
pub fn decode(bytes: &[u8]) -> Result<(Config, Vec<(String, Tensor<f32>)>)> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(MAGIC.len(), "magic")?;
    let len = r.u32("config length")?;
    let text = r.take(len, "config")?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Corrupt(format!("config text: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")?;
        if name_len > MAX_NAME {
            return Err(Error::Corrupt(format!("parameter {i} has a {name_len}-byte name")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Corrupt(format!("parameter {i} name: {e}")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Corrupt(format!("`{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("`{name}` dims {dims:?} overflow")))?;
        let payload = r.take(numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name, Tensor::new(&dims, data)?));
    }
    let body_end = r.pos;
    let footer = r.take(8, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let stored = u64::from_le_bytes(footer.try_into().expect("8 bytes"));
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let cfg = Config::from_json(text).map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    Ok((cfg, params))
}

/// Loads a checkpoint and rebuilds its model. If `requested` is given, the
/// checkpoint must match its resolution and architecture.
pub fn load_checkpoint(path: &Path, requested: Option<&Config>) -> Result<(Spsn, ParamStore)> {
    let bytes = std::fs::read(path)?;
    let (saved, params) = decode(&bytes)?;
    if let Some(req) = requested {
        if req.image_size != saved.image_size {
            return Err(Error::ResolutionMismatch {
                saved: saved.image_size,
                requested: req.image_size,
            });
        }
        if let Some(field) = saved.architecture_mismatch(req) {
            return Err(Error::Incompatible(format!("`{field}` differs from the checkpoint")));
        }
    }
    let model = Spsn::new(&saved)?;
    let mut store = model.init(0)?;
    if params.len() != store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} parameters, model declares {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        if !store.contains(&name) {
            return Err(Error::Incompatible(format!("unexpected parameter `{name}`")));
        }
        store.set(&name, value)?;
    }
    Ok((model, store))
}
