//! On-disk formats: the `FVT1` tensor container and plain PGM heatmaps.
//!
//! `FVT1` layout: the 4 magic bytes `FVT1`, a little-endian `u32` rank, one
//! little-endian `u32` per extent, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FvitError, Result};
use crate::tensor::Tensor;

pub const FVT_MAGIC: &[u8; 4] = b"FVT1";

pub fn encode_fvt(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(FVT_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fvt(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| FvitError::Format("truncated header".into()))?;
    if &magic != FVT_MAGIC {
        return Err(FvitError::Format(format!("bad magic {magic:?}")));
    }
    let read_u32 = |r: &mut &[u8]| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| FvitError::Format("truncated header".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(FvitError::Format(format!("unsupported rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r)? as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 4 * n {
        return Err(FvitError::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            r.len(),
            4 * n
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_fvt(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_fvt(t))?;
    Ok(())
}

pub fn read_fvt(path: &Path) -> Result<Tensor> {
    decode_fvt(&fs::read(path)?)
}

/// Plain-text PGM (`P2`, maxval 255) of a `[H, W]` or `[1, H, W]` map with
/// values in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<String> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => return Err(FvitError::dim("pgm", other, &[0, 0])),
    };
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let line: Vec<String> = (0..w)
            .map(|x| {
                let v = map.data()[y * w + x].clamp(0.0, 1.0);
                ((v * 255.0).round() as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}
