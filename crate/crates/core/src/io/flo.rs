use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Shape, Tensor};

/// Float tag at offset 0 of every `.flo` file ("PIEH" in ASCII).
pub const FLO_SENTINEL: f32 = 202021.25;

const HEADER_LEN: usize = 12;

/// `[f32 sentinel][i32 width][i32 height]` then interleaved `(u, v)` f32
/// pairs in row-major order, all little-endian.
pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if !flow.is_finite() {
        return Err(Error::Numeric("refusing to write non-finite flow".into()));
    }
    let (h, w) = flow.shape().spatial();
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * 8);
    out.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    if bytes.len() < 4 || f32::from_le_bytes(word(0)) != FLO_SENTINEL {
        return Err(Error::NotFlo(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptFlo(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::CorruptFlo(format!(
            "{}: invalid size {w}x{h}",
            path.display()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::CorruptFlo(format!("{}: size overflow", path.display())))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(Error::CorruptFlo(format!(
            "{}: expected {expected} payload bytes for {w}x{h}, found {}",
            path.display(),
            bytes.len() - HEADER_LEN
        )));
    }
    let mut data = vec![0.0f32; 2 * w * h];
    let (u, v) = data.split_at_mut(w * h);
    for p in 0..w * h {
        let off = HEADER_LEN + p * 8;
        u[p] = f32::from_le_bytes(word(off));
        v[p] = f32::from_le_bytes(word(off + 4));
    }
    FlowField::new(Tensor::from_vec(Shape::new(2, h, w), data)?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}
