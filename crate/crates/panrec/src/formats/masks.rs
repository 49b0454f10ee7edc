//! 2D mask sets: one run-length file per mask plus a JSON manifest.
//!
//! A mask file holds magic `MRLE`, width, height and run count as `u32`, then
//! the run lengths in row-major order, starting with a background run that
//! may be empty.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use panrec_core::propagation::{Mask2D, MaskSet2D};
use panrec_core::{CategoryId, InstanceId};

use super::{bad_data, create, expect_end, open, read_json, read_u32, write_json};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"MRLE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub id: InstanceId,
    pub category: CategoryId,
    pub score: f32,
    /// Mask file, relative to the manifest.
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub width: u32,
    pub height: u32,
    pub masks: Vec<MaskEntry>,
}

pub fn encode_rle(w: &mut impl Write, width: u32, height: u32, pixels: &[bool]) -> io::Result<()> {
    let mut runs = Vec::new();
    let (mut current, mut len) = (false, 0u32);
    for &p in pixels {
        if p != current {
            runs.push(len);
            current = p;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    w.write_all(&MAGIC)?;
    for v in [width, height, runs.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for r in runs {
        w.write_all(&r.to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_rle(r: &mut impl Read) -> io::Result<(u32, u32, Vec<bool>)> {
    if super::read_array::<4>(r)? != MAGIC {
        return Err(bad_data("not a mask file (expected magic MRLE)"));
    }
    let (w, h, n) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    let total = w as u64 * h as u64;
    if n as u64 > total + 1 {
        return Err(bad_data("more runs than pixels"));
    }
    let mut pixels = Vec::with_capacity(total as usize);
    let mut value = false;
    for _ in 0..n {
        let len = read_u32(r)? as u64;
        if pixels.len() as u64 + len > total {
            return Err(bad_data("runs exceed the image size"));
        }
        pixels.extend(std::iter::repeat_n(value, len as usize));
        value = !value;
    }
    if pixels.len() as u64 != total {
        return Err(bad_data("runs do not cover the image"));
    }
    expect_end(r)?;
    Ok((w, h, pixels))
}

/// Writes the manifest and one `<stem>_<n>.mrle` file per mask beside it.
pub fn write_mask_set(manifest: &Path, set: &MaskSet2D) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("masks");
    let mut entries = Vec::with_capacity(set.len());
    for (n, m) in set.masks.iter().enumerate() {
        let file = PathBuf::from(format!("{stem}_{n}.mrle"));
        let path = dir.join(&file);
        let mut w = create(&path)?;
        encode_rle(&mut w, set.width, set.height, &m.pixels).at(&path)?;
        w.flush().at(&path)?;
        entries.push(MaskEntry {
            id: m.id,
            category: m.category,
            score: m.score,
            file,
        });
    }
    write_json(
        manifest,
        &MaskManifest {
            width: set.width,
            height: set.height,
            masks: entries,
        },
    )
}

pub fn read_mask_set(manifest: &Path) -> Result<MaskSet2D> {
    let m: MaskManifest = read_json(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let mut set = MaskSet2D::new(m.width, m.height);
    for e in m.masks {
        let path = dir.join(&e.file);
        let (w, h, pixels) = decode_rle(&mut open(&path)?).at(&path)?;
        if (w, h) != (m.width, m.height) {
            return Err(Error::format(
                &path,
                format!("mask is {w}x{h}, manifest says {}x{}", m.width, m.height),
            ));
        }
        set.push(Mask2D {
            id: e.id,
            category: e.category,
            score: e.score,
            pixels,
        })
        .map_err(|err| Error::format(&path, err.to_string()))?;
    }
    Ok(set)
}
