//! 3-D Morton (Z-order) codes with 21 bits per axis.
//!
//! Bit `3k` of a code is bit `k` of x, bit `3k + 1` bit `k` of y and bit `3k + 2`
//! bit `k` of z.

use crate::error::{Error, Result};

pub const MAX_COORD: u32 = (1 << 21) - 1;

/// A Morton code tagged with the octree level it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MortonKey {
    pub code: u64,
    pub level: u32,
}

impl MortonKey {
    pub fn new(ix: u32, iy: u32, iz: u32, level: u32) -> Result<Self> {
        Ok(Self {
            code: morton_encode(ix, iy, iz)?,
            level,
        })
    }

    pub fn coords(&self) -> [u32; 3] {
        morton_decode(self.code)
    }
}

#[inline]
fn spread(v: u32) -> u64 {
    let mut w = v as u64 & 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x100f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

#[inline]
fn compact(code: u64) -> u32 {
    let mut w = code & 0x1249_2492_4924_9249;
    w = (w ^ (w >> 2)) & 0x10c3_0c30_c30c_30c3;
    w = (w ^ (w >> 4)) & 0x100f_00f0_0f00_f00f;
    w = (w ^ (w >> 8)) & 0x001f_0000_ff00_00ff;
    w = (w ^ (w >> 16)) & 0x001f_0000_0000_ffff;
    w = (w ^ (w >> 32)) & 0x1f_ffff;
    w as u32
}

/// Interleaves the low 21 bits of each coordinate. Callers guarantee the range.
#[inline]
pub fn morton_encode_unchecked(ix: u32, iy: u32, iz: u32) -> u64 {
    spread(ix) | spread(iy) << 1 | spread(iz) << 2
}

pub fn morton_encode(ix: u32, iy: u32, iz: u32) -> Result<u64> {
    if ix > MAX_COORD || iy > MAX_COORD || iz > MAX_COORD {
        return Err(Error::InvalidParameter(format!(
            "morton coordinate ({ix}, {iy}, {iz}) exceeds 21 bits"
        )));
    }
    Ok(morton_encode_unchecked(ix, iy, iz))
}

pub fn morton_decode(code: u64) -> [u32; 3] {
    [compact(code), compact(code >> 1), compact(code >> 2)]
}
