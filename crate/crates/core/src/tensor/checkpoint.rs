//! Binary checkpoint format.
//!
//! Layout: the magic bytes `RGFM1`, then one record per parameter in
//! [`ParamSet`] order: `name_len: u32le`, name bytes (UTF-8),
//! `rows: u32le`, `cols: u32le`, then `rows * cols` little-endian `f64`
//! values in row-major order. The loader walks records and requires the
//! final offset to land exactly on the file size.

use std::fs;
use std::path::Path;

use crate::tensor::{Matrix, ParamSet};
use crate::{RgfmError, Result};

const MAGIC: &[u8; 5] = b"RGFM1";

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(MAGIC);
    for (name, m) in params.iter() {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(RgfmError::Checkpoint(format!(
            "{}: missing RGFM1 magic",
            path.display()
        )));
    }
    let mut params = ParamSet::new();
    let mut off = MAGIC.len();
    let read_u32 = |buf: &[u8], off: usize| -> Result<u32> {
        let end = off + 4;
        if end > buf.len() {
            return Err(RgfmError::Checkpoint("truncated header field".into()));
        }
        Ok(u32::from_le_bytes(buf[off..end].try_into().unwrap()))
    };
    while off < buf.len() {
        let name_len = read_u32(&buf, off)? as usize;
        off += 4;
        if off + name_len > buf.len() {
            return Err(RgfmError::Checkpoint("truncated parameter name".into()));
        }
        let name = std::str::from_utf8(&buf[off..off + name_len])
            .map_err(|_| RgfmError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        off += name_len;
        let rows = read_u32(&buf, off)? as usize;
        off += 4;
        let cols = read_u32(&buf, off)? as usize;
        off += 4;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| RgfmError::Checkpoint("parameter size overflow".into()))?;
        let end = off
            .checked_add(n * 8)
            .ok_or_else(|| RgfmError::Checkpoint("parameter size overflow".into()))?;
        if end > buf.len() {
            return Err(RgfmError::Checkpoint(format!(
                "truncated data for parameter {name}: need {} bytes, have {}",
                n * 8,
                buf.len() - off
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in buf[off..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        off = end;
        if params.contains(&name) {
            return Err(RgfmError::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.insert(name, Matrix::from_vec(rows, cols, data));
    }
    debug_assert_eq!(off, buf.len());
    Ok(params)
}
