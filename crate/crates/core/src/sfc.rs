//! Bijective maps between 3D grid cells and 1D curve keys.
//!
//! Four patterns are supported: Z-order (Morton), Hilbert, and their
//! "trans" variants which traverse y before x. Keys occupy the low `3 * b`
//! bits of a `u64`, where `b` is the number of bits per axis.
//!
//! Z-order interleaves with x in the least significant slot of every bit
//! triple (`key bit 3j = x_j`, `3j+1 = y_j`, `3j+2 = z_j`). The Hilbert
//! curve uses Skilling's transpose construction and starts at the origin.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest supported resolution. Keys then fill 48 bits, leaving the top
/// 16 bits of a serialized code for the batch index.
pub const MAX_BITS: u32 = 16;

/// Number of bits per axis, `1..=16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitsPerAxis(u32);

impl BitsPerAxis {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::Range {
                what: "bits per axis",
                value: bits as u64,
                limit: MAX_BITS as u64,
            });
        }
        Ok(BitsPerAxis(bits))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Number of cells along one axis.
    pub fn side(self) -> u64 {
        1u64 << self.0
    }

    /// Number of cells in the whole grid, which is also the key space size.
    pub fn cells(self) -> u64 {
        1u64 << (3 * self.0)
    }
}

/// A discretized position. Each component must be below `2^b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GridCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl GridCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        GridCoord { x, y, z }
    }

    /// Builds a coordinate, rejecting any component outside the grid.
    pub fn checked(x: u32, y: u32, z: u32, bits: BitsPerAxis) -> Result<Self> {
        let c = GridCoord { x, y, z };
        c.validate(bits)?;
        Ok(c)
    }

    pub fn validate(&self, bits: BitsPerAxis) -> Result<()> {
        let limit = bits.side();
        for (what, v) in [("x cell", self.x), ("y cell", self.y), ("z cell", self.z)] {
            if v as u64 >= limit {
                return Err(Error::Range {
                    what,
                    value: v as u64,
                    limit,
                });
            }
        }
        Ok(())
    }

    pub fn swap_xy(self) -> Self {
        GridCoord {
            x: self.y,
            y: self.x,
            z: self.z,
        }
    }

    pub fn l1_distance(&self, other: &GridCoord) -> u64 {
        (self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z)) as u64
    }
}

/// A position along a curve; only the low `3 * b` bits are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CurveKey(pub u64);

/// Serialization pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CurvePattern {
    Z,
    TransZ,
    Hilbert,
    TransHilbert,
}

impl CurvePattern {
    pub const ALL: [CurvePattern; 4] = [
        CurvePattern::Z,
        CurvePattern::TransZ,
        CurvePattern::Hilbert,
        CurvePattern::TransHilbert,
    ];

    /// Identifier used by the binary permutation dump.
    pub fn id(self) -> u8 {
        match self {
            CurvePattern::Z => 0,
            CurvePattern::TransZ => 1,
            CurvePattern::Hilbert => 2,
            CurvePattern::TransHilbert => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::format(format!("unknown pattern id {id}")))
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CurvePattern::Z => "Z",
            CurvePattern::TransZ => "TZ",
            CurvePattern::Hilbert => "H",
            CurvePattern::TransHilbert => "TH",
        }
    }

    fn is_trans(self) -> bool {
        matches!(self, CurvePattern::TransZ | CurvePattern::TransHilbert)
    }
}

impl fmt::Display for CurvePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for CurvePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Z" | "ZORDER" | "Z-ORDER" => Ok(CurvePattern::Z),
            "TZ" | "TRANSZ" | "TRANS-Z" => Ok(CurvePattern::TransZ),
            "H" | "HILBERT" => Ok(CurvePattern::Hilbert),
            "TH" | "TRANSHILBERT" | "TRANS-HILBERT" => Ok(CurvePattern::TransHilbert),
            other => Err(Error::Usage(format!("unknown pattern `{other}`"))),
        }
    }
}

/// Parses a comma separated pattern list such as `Z,TZ,H,TH`, rejecting
/// empty lists and duplicates.
pub fn parse_patterns(s: &str) -> Result<Vec<CurvePattern>> {
    let patterns = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(CurvePattern::from_str)
        .collect::<Result<Vec<_>>>()?;
    validate_patterns(&patterns)?;
    Ok(patterns)
}

pub fn validate_patterns(patterns: &[CurvePattern]) -> Result<()> {
    if patterns.is_empty() {
        return Err(Error::param("pattern list is empty"));
    }
    for (i, p) in patterns.iter().enumerate() {
        if patterns[..i].contains(p) {
            return Err(Error::param(format!("pattern {p} listed twice")));
        }
    }
    Ok(())
}

/// Maps a grid cell to its curve key.
pub fn encode(pattern: CurvePattern, c: GridCoord, bits: BitsPerAxis) -> Result<CurveKey> {
    c.validate(bits)?;
    Ok(encode_unchecked(pattern, c, bits))
}

/// Maps a curve key back to its grid cell.
pub fn decode(pattern: CurvePattern, key: CurveKey, bits: BitsPerAxis) -> Result<GridCoord> {
    if key.0 >= bits.cells() {
        return Err(Error::Range {
            what: "curve key",
            value: key.0,
            limit: bits.cells(),
        });
    }
    Ok(decode_unchecked(pattern, key, bits))
}

/// [`encode`] without the range check; the caller guarantees `c` fits.
#[inline]
pub(crate) fn encode_unchecked(pattern: CurvePattern, c: GridCoord, bits: BitsPerAxis) -> CurveKey {
    let c = if pattern.is_trans() { c.swap_xy() } else { c };
    match pattern {
        CurvePattern::Z | CurvePattern::TransZ => CurveKey(morton_encode(c)),
        CurvePattern::Hilbert | CurvePattern::TransHilbert => {
            CurveKey(hilbert_encode(c, bits.get()))
        }
    }
}

#[inline]
fn decode_unchecked(pattern: CurvePattern, key: CurveKey, bits: BitsPerAxis) -> GridCoord {
    let c = match pattern {
        CurvePattern::Z | CurvePattern::TransZ => morton_decode(key.0),
        CurvePattern::Hilbert | CurvePattern::TransHilbert => hilbert_decode(key.0, bits.get()),
    };
    if pattern.is_trans() {
        c.swap_xy()
    } else {
        c
    }
}

/// Spreads the low 21 bits of `v` so bit `i` lands on bit `3i`.
#[inline]
fn spread3(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Inverse of [`spread3`].
#[inline]
fn compact3(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

#[inline]
fn morton_encode(c: GridCoord) -> u64 {
    spread3(c.x) | (spread3(c.y) << 1) | (spread3(c.z) << 2)
}

#[inline]
fn morton_decode(key: u64) -> GridCoord {
    GridCoord {
        x: compact3(key),
        y: compact3(key >> 1),
        z: compact3(key >> 2),
    }
}

/// Skilling's "AxestoTranspose" followed by bit interleaving with axis 0
/// (x) most significant inside every triple.
#[inline]
fn hilbert_encode(c: GridCoord, bits: u32) -> u64 {
    let mut x = [c.x, c.y, c.z];
    let m = 1u32 << (bits - 1);

    // Inverse undo.
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray encode.
    x[1] ^= x[0];
    x[2] ^= x[1];
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }

    let mut key = 0u64;
    for j in (0..bits).rev() {
        for v in &x {
            key = (key << 1) | ((*v >> j) & 1) as u64;
        }
    }
    key
}

#[inline]
fn hilbert_decode(key: u64, bits: u32) -> GridCoord {
    let mut x = [0u32; 3];
    for j in 0..bits {
        let triple = (key >> (3 * j)) as u32;
        x[0] |= ((triple >> 2) & 1) << j;
        x[1] |= ((triple >> 1) & 1) << j;
        x[2] |= (triple & 1) << j;
    }

    // Gray decode.
    let t = x[2] >> 1;
    x[2] ^= x[1];
    x[1] ^= x[0];
    x[0] ^= t;

    // Undo excess work.
    let n = 2u32 << (bits - 1);
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }

    GridCoord {
        x: x[0],
        y: x[1],
        z: x[2],
    }
}
