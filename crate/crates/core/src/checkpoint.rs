//! Binary checkpoints of a [`ParamStore`].
//!
//! Layout (little-endian): `"MSTDTCKPT"`, version `u32`, then one record per
//! parameter until end of file: name length `u32`, UTF-8 name, rank `u32`,
//! `rank` extents as `u32`, and the values as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 9] = b"MSTDTCKPT";
pub const CKPT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_values() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        push_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.shape().len());
        for &e in t.shape() {
            push_u32(&mut buf, e);
        }
        for &v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {pos}")))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<usize> {
    let b = take(buf, pos, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore> {
    let mut pos = 0;
    if take(buf, &mut pos, CKPT_MAGIC.len())? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(buf, &mut pos)?;
    if version != CKPT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    while pos < buf.len() {
        let len = read_u32(buf, &mut pos)?;
        let name = std::str::from_utf8(take(buf, &mut pos, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = read_u32(buf, &mut pos)?;
        let shape = (0..rank).map(|_| read_u32(buf, &mut pos)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let count = count.ok_or_else(|| Error::Format(format!("{name}: extent overflow")))?;
        let bytes = take(buf, &mut pos, count.saturating_mul(8))?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, values)?;
        store.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&fs::read(path)?)
}
