//! Sparse-volume files.
//!
//! Header, little-endian: magic `SPVL`, version `u32`, voxel size `f32`,
//! origin `3 x f32`, dims `3 x u32`, payload tag `u32`, cell count `u64`. The
//! low byte of the tag is the payload kind, the upper bytes hold the channel
//! width of vector payloads. Cells follow in canonical order as `3 x i32`
//! coordinates plus the payload.

use std::io::{self, Read, Write};
use std::path::Path;

use panrec_core::{GridSpec, InstanceId, Label, PanopticVoxel, SparseVolume, VoxelCoord};

use super::{bad_data, create, expect_end, open, read_f32, read_i32, read_u32, read_u64};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"SPVL";
pub const VERSION: u32 = 1;

/// Instance ids are stored as `u32` with 0 meaning none.
const NO_INSTANCE: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    /// `f32` signed distance in voxel units.
    Distance = 1,
    /// `width x f32` feature vector.
    Features = 2,
    /// `width x f32` channel logits.
    Logits = 3,
    /// Category `u32` and instance `u32`.
    Label = 4,
    /// Signed distance `f32`, category `u32`, instance `u32`.
    Panoptic = 5,
    /// `f32` occupancy probability.
    Occupancy = 6,
    /// `u32` channel or category index.
    Channel = 7,
    /// `u32` instance id.
    Instance = 8,
}

impl PayloadKind {
    fn from_u8(b: u8) -> Option<Self> {
        use PayloadKind::*;
        [
            Distance, Features, Logits, Label, Panoptic, Occupancy, Channel, Instance,
        ]
        .into_iter()
        .find(|k| *k as u8 == b)
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::Distance => "distance",
            PayloadKind::Features => "features",
            PayloadKind::Logits => "logits",
            PayloadKind::Label => "label",
            PayloadKind::Panoptic => "panoptic",
            PayloadKind::Occupancy => "occupancy",
            PayloadKind::Channel => "channel",
            PayloadKind::Instance => "instance",
        }
    }
}

/// A voxel payload with a fixed binary encoding.
pub trait Payload: Sized {
    /// Kinds this type may be stored as; the first is the default.
    const KINDS: &'static [PayloadKind];

    /// Channel width for vector payloads, 0 otherwise.
    fn width(&self) -> u32 {
        0
    }

    fn encode(&self, w: &mut impl Write) -> io::Result<()>;

    fn decode(r: &mut impl Read, width: u32) -> io::Result<Self>;
}

impl Payload for f32 {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Distance, PayloadKind::Occupancy];

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn decode(r: &mut impl Read, _: u32) -> io::Result<Self> {
        read_f32(r)
    }
}

impl Payload for Vec<f32> {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Features, PayloadKind::Logits];

    fn width(&self) -> u32 {
        self.len() as u32
    }

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        for v in self {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn decode(r: &mut impl Read, width: u32) -> io::Result<Self> {
        (0..width).map(|_| read_f32(r)).collect()
    }
}

fn encode_instance(w: &mut impl Write, i: Option<InstanceId>) -> io::Result<()> {
    match i {
        Some(NO_INSTANCE) => Err(bad_data("instance id 0 is reserved for none")),
        _ => w.write_all(&i.unwrap_or(NO_INSTANCE).to_le_bytes()),
    }
}

fn decode_instance(r: &mut impl Read) -> io::Result<Option<InstanceId>> {
    let i = read_u32(r)?;
    Ok((i != NO_INSTANCE).then_some(i))
}

impl Payload for Label {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Label];

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.category.to_le_bytes())?;
        encode_instance(w, self.instance)
    }

    fn decode(r: &mut impl Read, _: u32) -> io::Result<Self> {
        Ok(Label::new(read_u32(r)?, decode_instance(r)?))
    }
}

impl Payload for PanopticVoxel {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Panoptic];

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.sdf.to_le_bytes())?;
        w.write_all(&self.semantic.to_le_bytes())?;
        encode_instance(w, self.instance)
    }

    fn decode(r: &mut impl Read, _: u32) -> io::Result<Self> {
        let sdf = read_f32(r)?;
        Ok(PanopticVoxel::new(sdf, Label::new(read_u32(r)?, decode_instance(r)?)))
    }
}

impl Payload for u32 {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Channel];

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn decode(r: &mut impl Read, _: u32) -> io::Result<Self> {
        read_u32(r)
    }
}

impl Payload for Option<InstanceId> {
    const KINDS: &'static [PayloadKind] = &[PayloadKind::Instance];

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        encode_instance(w, *self)
    }

    fn decode(r: &mut impl Read, _: u32) -> io::Result<Self> {
        decode_instance(r)
    }
}

/// Parsed file header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub spec: GridSpec,
    pub kind: PayloadKind,
    pub width: u32,
    pub count: u64,
}

pub fn decode_header(r: &mut impl Read) -> io::Result<Header> {
    if super::read_array::<4>(r)? != MAGIC {
        return Err(bad_data("not a sparse volume (expected magic SPVL)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad_data(format!("unsupported sparse volume version {version}")));
    }
    let voxel_size = read_f32(r)?;
    let origin = [read_f32(r)?, read_f32(r)?, read_f32(r)?];
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let spec = GridSpec::new(voxel_size, origin, dims).map_err(|e| bad_data(e.to_string()))?;
    let tag = read_u32(r)?;
    let kind =
        PayloadKind::from_u8(tag as u8).ok_or_else(|| bad_data(format!("unknown payload kind {}", tag as u8)))?;
    let count = read_u64(r)?;
    if count > spec.voxel_count() {
        return Err(bad_data(format!("{count} cells exceed the grid")));
    }
    Ok(Header {
        spec,
        kind,
        width: tag >> 8,
        count,
    })
}

pub fn encode<P: Payload>(w: &mut impl Write, vol: &SparseVolume<P>, kind: PayloadKind) -> io::Result<()> {
    if !P::KINDS.contains(&kind) {
        return Err(bad_data(format!("payload cannot be stored as {}", kind.name())));
    }
    let width = vol.iter().next().map_or(0, |(_, p)| p.width());
    if width >= 1 << 24 {
        return Err(bad_data("channel width does not fit the payload tag"));
    }
    if vol.iter().any(|(_, p)| p.width() != width) {
        return Err(bad_data("vector payloads must share one width"));
    }
    let s = vol.spec();
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&s.voxel_size.to_le_bytes())?;
    for o in s.origin {
        w.write_all(&o.to_le_bytes())?;
    }
    for d in s.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(kind as u32 | width << 8).to_le_bytes())?;
    w.write_all(&(vol.len() as u64).to_le_bytes())?;
    for (c, p) in vol.iter() {
        for a in c.to_array() {
            w.write_all(&a.to_le_bytes())?;
        }
        p.encode(w)?;
    }
    Ok(())
}

pub fn decode<P: Payload>(r: &mut impl Read) -> io::Result<(SparseVolume<P>, PayloadKind)> {
    let h = decode_header(r)?;
    if !P::KINDS.contains(&h.kind) {
        return Err(bad_data(format!("unexpected {} payload", h.kind.name())));
    }
    let mut vol = SparseVolume::new(h.spec);
    let mut last: Option<VoxelCoord> = None;
    for _ in 0..h.count {
        let c = VoxelCoord::new(read_i32(r)?, read_i32(r)?, read_i32(r)?);
        if last.is_some_and(|l| l >= c) {
            return Err(bad_data("cells are not in canonical order"));
        }
        last = Some(c);
        let p = P::decode(r, h.width)?;
        vol.insert(c, p).map_err(|e| bad_data(e.to_string()))?;
    }
    expect_end(r)?;
    Ok((vol, h.kind))
}

pub fn read_header(path: &Path) -> Result<Header> {
    decode_header(&mut open(path)?).at(path)
}

pub fn read<P: Payload>(path: &Path) -> Result<SparseVolume<P>> {
    Ok(read_with_kind(path)?.0)
}

pub fn read_with_kind<P: Payload>(path: &Path) -> Result<(SparseVolume<P>, PayloadKind)> {
    decode(&mut open(path)?).at(path)
}

/// Writes with the payload's default kind.
pub fn write<P: Payload>(path: &Path, vol: &SparseVolume<P>) -> Result<()> {
    write_as(path, vol, P::KINDS[0])
}

pub fn write_as<P: Payload>(path: &Path, vol: &SparseVolume<P>, kind: PayloadKind) -> Result<()> {
    let mut w = create(path)?;
    encode(&mut w, vol, kind).map_err(|e| Error::format(path, e.to_string()))?;
    w.flush().at(path)
}
