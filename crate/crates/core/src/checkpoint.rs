//! Versioned checkpoint container: a JSON metadata block plus named f64
//! parameter arrays, all little-endian, written deterministically.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Arr;

const MAGIC: &[u8; 4] = b"EKPT";
const VERSION: u32 = 1;

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.display().to_string(), msg: msg.into() }
}

/// Write `meta` + `params` to `path`. Parameter order is the insertion
/// order of `params`, making the byte stream reproducible.
pub fn save(path: &Path, meta: &serde_json::Value, params: &Params) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("metadata to JSON");
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, arr) in params.iter() {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize, "parameter name too long");
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a checkpoint back; inverse of [`save`].
pub fn load(path: &Path) -> Result<(serde_json::Value, Params)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(ck_err(path, "truncated checkpoint"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != MAGIC {
        return Err(ck_err(path, "bad magic (not a checkpoint)"));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut at, meta_len)?)
        .map_err(|e| ck_err(path, format!("metadata: {e}")))?;
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, name_len)?)
            .map_err(|e| ck_err(path, format!("parameter name: {e}")))?
            .to_string();
        let ndim = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut at, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| ck_err(path, format!("parameter {name}: {e}")))?;
        params.insert(name, arr);
    }
    if at != bytes.len() {
        return Err(ck_err(path, "trailing bytes after parameters"));
    }
    Ok((meta, params))
}
