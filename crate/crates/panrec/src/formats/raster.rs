//! Binary rasters. A 16-byte header (magic, width, height, channels as `u32`
//! little-endian) is followed by pixel-major samples.
//!
//! `DPTH` stores `f32` samples and carries depth maps (one channel), feature
//! rasters and mask-logit rasters. `DPMM` stores one `u16` millimeter depth per
//! pixel with 0 meaning invalid.

use std::io::{self, Read, Write};
use std::path::Path;

use panrec_core::{DepthMap, Raster};

use super::{bad_data, create, expect_end, open, read_f32, read_u16, read_u32};
use crate::error::{IoContext, Result};

pub const FLOAT_MAGIC: [u8; 4] = *b"DPTH";
pub const MILLIMETER_MAGIC: [u8; 4] = *b"DPMM";

/// Rasters beyond this many samples are rejected before allocation.
const MAX_SAMPLES: u64 = 1 << 31;

fn header(r: &mut impl Read) -> io::Result<([u8; 4], u32, u32, u32)> {
    let magic = super::read_array::<4>(r)?;
    let (w, h, c) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    if w as u64 * h as u64 * c as u64 > MAX_SAMPLES {
        return Err(bad_data(format!("raster {w}x{h}x{c} is too large")));
    }
    Ok((magic, w, h, c))
}

pub fn decode_raster(r: &mut impl Read) -> io::Result<Raster> {
    let (magic, w, h, c) = header(r)?;
    if magic != FLOAT_MAGIC {
        return Err(bad_data("not a float raster (expected magic DPTH)"));
    }
    let n = w as usize * h as usize * c as usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f32(r)?);
    }
    expect_end(r)?;
    Raster::new(w, h, c, data).map_err(|e| bad_data(e.to_string()))
}

pub fn encode_raster(w: &mut impl Write, r: &Raster) -> io::Result<()> {
    w.write_all(&FLOAT_MAGIC)?;
    for v in [r.width, r.height, r.channels] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &r.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads either depth encoding.
pub fn decode_depth(r: &mut impl Read) -> io::Result<DepthMap> {
    let (magic, w, h, c) = header(r)?;
    if c != 1 {
        return Err(bad_data(format!("depth raster has {c} channels")));
    }
    let n = w as usize * h as usize;
    let mut values = Vec::with_capacity(n);
    match magic {
        FLOAT_MAGIC => {
            for _ in 0..n {
                values.push(read_f32(r)?);
            }
        }
        MILLIMETER_MAGIC => {
            for _ in 0..n {
                values.push(read_u16(r)? as f32 / 1000.0);
            }
        }
        _ => return Err(bad_data("not a depth raster (expected magic DPTH or DPMM)")),
    }
    expect_end(r)?;
    DepthMap::new(w, h, values).map_err(|e| bad_data(e.to_string()))
}

pub fn encode_depth(w: &mut impl Write, d: &DepthMap) -> io::Result<()> {
    encode_raster(
        w,
        &Raster::new(d.width, d.height, 1, d.values.clone()).map_err(|e| bad_data(e.to_string()))?,
    )
}

/// Millimeter encoding; depths beyond 65.535 m and invalid pixels become 0.
pub fn encode_depth_mm(w: &mut impl Write, d: &DepthMap) -> io::Result<()> {
    w.write_all(&MILLIMETER_MAGIC)?;
    for v in [d.width, d.height, 1] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &d.values {
        let mm = if DepthMap::is_valid_depth(v) {
            let m = (v as f64 * 1000.0).round();
            if m <= u16::MAX as f64 {
                m as u16
            } else {
                0
            }
        } else {
            0
        };
        w.write_all(&mm.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode_raster(&mut open(path)?).at(path)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    let mut w = create(path)?;
    encode_raster(&mut w, r).at(path)?;
    w.flush().at(path)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&mut open(path)?).at(path)
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let mut w = create(path)?;
    encode_depth(&mut w, d).at(path)?;
    w.flush().at(path)
}

pub fn write_depth_mm(path: &Path, d: &DepthMap) -> Result<()> {
    let mut w = create(path)?;
    encode_depth_mm(&mut w, d).at(path)?;
    w.flush().at(path)
}
