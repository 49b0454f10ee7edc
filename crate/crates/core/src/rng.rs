//! Counter-based keyed random streams.
//!
//! Every random choice is derived from one global seed split by a key (for
//! example a voxel coordinate), so results do not depend on iteration order.

use crate::volume::VoxelCoord;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyedStream {
    state: u64,
}

impl KeyedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: mix64(seed ^ GOLDEN),
        }
    }

    /// Independent child stream for `key`.
    pub fn split(&self, key: u64) -> Self {
        Self {
            state: mix64(self.state ^ mix64(key.wrapping_add(GOLDEN))),
        }
    }

    pub fn split_voxel(&self, c: VoxelCoord) -> Self {
        self.split(c.i as u32 as u64)
            .split(c.j as u32 as u64)
            .split(c.k as u32 as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform index in `0..n` (multiply-shift reduction). `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// Index in `0..n` chosen by the stream keyed on `(seed, voxel)`.
pub fn keyed_index(seed: u64, c: VoxelCoord, n: usize) -> usize {
    KeyedStream::new(seed).split_voxel(c).index(n)
}
