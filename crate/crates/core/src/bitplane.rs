//! Exponent-aligned fixed point and MSB-first negabinary bitplanes.
//!
//! A block of values shares one exponent `e` (the smallest integer with
//! `max|v| < 2^e`) and is truncated toward zero to `B` fractional bits:
//! `q = trunc(v * 2^(B - e))`, so `|q| < 2^B`. Each `q` is rewritten in
//! base -2, which needs `B + 2` digits for that range, and digit `d` of every
//! element forms one bitplane. Plane 0 carries the most significant digit.
//!
//! Dropping the `j` least significant digits changes an integer by at most
//! `floor((2^(j+1) - 1) / 3)`, which together with the truncation step gives
//! the decode bound returned by [`decode_bound`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ldexp, pow2, Real};

/// Bits per storage word; element `j` of a word lives at bit `j % 64`.
pub const WORD_BITS: usize = 64;

const NEGABINARY_MASK: u128 = 0xAAAA_AAAA_AAAA_AAAA_AAAA_AAAA_AAAA_AAAA;

/// Number of negabinary digit planes for `bits` fractional bits.
#[inline]
pub const fn plane_count(bits: u32) -> u32 {
    bits + 2
}

#[inline]
pub fn words_per_plane(count: usize) -> usize {
    count.div_ceil(WORD_BITS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Layout {
    SequentialBlock = 0,
    InterleavedTile = 1,
}

impl Layout {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Layout::SequentialBlock),
            1 => Some(Layout::InterleavedTile),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" | "sequential_block" | "sequential-block" => Ok(Layout::SequentialBlock),
            "interleaved" | "interleaved_tile" | "interleaved-tile" => Ok(Layout::InterleavedTile),
            other => Err(format!("unknown layout '{other}'")),
        }
    }
}

/// Storage order of elements within bitplanes.
///
/// For [`Layout::InterleavedTile`], each full tile of `64 * depth` elements
/// stores element `(i % 64) * depth + i / 64` at storage position `i`, so word
/// `r` of a tile gathers every `depth`-th element starting at `r`. A trailing
/// partial tile is stored in element order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutPermutation {
    pub layout: Layout,
    pub depth: u32,
}

impl LayoutPermutation {
    pub fn new(layout: Layout, depth: u32) -> Self {
        LayoutPermutation { layout, depth }
    }

    pub fn tile_len(&self) -> usize {
        WORD_BITS * self.depth as usize
    }

    /// Element index held at storage position `pos` of a `count`-element block.
    #[inline]
    pub fn source(&self, pos: usize, count: usize) -> usize {
        match self.layout {
            Layout::SequentialBlock => pos,
            Layout::InterleavedTile => {
                let tile = self.tile_len();
                let full = count / tile * tile;
                if pos >= full {
                    pos
                } else {
                    let base = pos / tile * tile;
                    let i = pos - base;
                    base + (i % WORD_BITS) * self.depth as usize + i / WORD_BITS
                }
            }
        }
    }

    /// Inverse of [`source`](Self::source).
    #[inline]
    pub fn position(&self, element: usize, count: usize) -> usize {
        match self.layout {
            Layout::SequentialBlock => element,
            Layout::InterleavedTile => {
                let tile = self.tile_len();
                let full = count / tile * tile;
                if element >= full {
                    element
                } else {
                    let base = element / tile * tile;
                    let k = element - base;
                    let depth = self.depth as usize;
                    base + (k % depth) * WORD_BITS + k / depth
                }
            }
        }
    }
}

/// Values of one block in shared-exponent fixed point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointBlock {
    /// Smallest integer with `max|v| < 2^exponent` (0 when all values are 0).
    pub exponent: i32,
    /// Fractional bits `B`.
    pub bits: u32,
    pub q: Vec<i128>,
}

impl FixedPointBlock {
    pub fn count(&self) -> usize {
        self.q.len()
    }

    /// Weight of one unit of `q`, `2^(e - B)`.
    pub fn lsb(&self) -> f64 {
        pow2(self.exponent - self.bits as i32)
    }

    pub fn dequantize<T: Real>(&self) -> Vec<T> {
        let shift = self.exponent - self.bits as i32;
        self.q
            .iter()
            .map(|&q| ldexp(T::from_i128(q).unwrap(), shift))
            .collect()
    }

    pub fn meta(&self, layout: Layout) -> BlockMeta {
        BlockMeta {
            exponent: self.exponent,
            bits: self.bits,
            count: self.count(),
            layout,
        }
    }
}

/// What a decoder needs besides the planes themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMeta {
    pub exponent: i32,
    pub bits: u32,
    pub count: usize,
    pub layout: Layout,
}

impl BlockMeta {
    pub fn depth(&self) -> u32 {
        plane_count(self.bits)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=64).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BadBitplaneCount(bits))
    }
}

/// Smallest `e` with `|v| < 2^e` for the largest magnitude in `values`.
pub fn block_exponent<T: Real>(values: &[T]) -> i32 {
    let max = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if max == T::zero() {
        return 0;
    }
    let (mantissa, exp, _) = max.integer_decode();
    let bit_len = 64 - mantissa.leading_zeros() as i32;
    exp as i32 + bit_len
}

pub fn align_fixed_point<T: Real>(values: &[T], bits: u32) -> Result<FixedPointBlock> {
    check_bits(bits)?;
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let exponent = block_exponent(values);
    let q = values
        .iter()
        .map(|v| {
            let (mantissa, exp, sign) = v.integer_decode();
            let shift = exp as i32 + bits as i32 - exponent;
            let mag: u128 = if mantissa == 0 {
                0
            } else if shift >= 0 {
                (mantissa as u128) << shift
            } else if shift <= -128 {
                0
            } else {
                (mantissa as u128) >> (-shift)
            };
            if sign < 0 {
                -(mag as i128)
            } else {
                mag as i128
            }
        })
        .collect();
    Ok(FixedPointBlock { exponent, bits, q })
}

#[inline]
pub fn to_negabinary(q: i128) -> u128 {
    (q as u128).wrapping_add(NEGABINARY_MASK) ^ NEGABINARY_MASK
}

#[inline]
pub fn from_negabinary(n: u128) -> i128 {
    (n ^ NEGABINARY_MASK).wrapping_sub(NEGABINARY_MASK) as i128
}

/// Negabinary digit strings of a whole block.
pub fn to_negabinary_block(q: &[i128]) -> Vec<u128> {
    q.iter().map(|&v| to_negabinary(v)).collect()
}

/// MSB-first bitplanes of a block (or a prefix of them).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitplaneSet {
    layout: Layout,
    depth: u32,
    count: usize,
    planes: Vec<Vec<u64>>,
}

impl BitplaneSet {
    /// An empty prefix (no planes) for a block.
    pub fn empty(layout: Layout, depth: u32, count: usize) -> Self {
        BitplaneSet {
            layout,
            depth,
            count,
            planes: Vec::new(),
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Number of planes in the complete set.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Number of planes present (a prefix of the complete set).
    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn plane(&self, p: usize) -> &[u64] {
        &self.planes[p]
    }

    pub fn planes(&self) -> &[Vec<u64>] {
        &self.planes
    }

    /// Little-endian bytes of plane `p`.
    pub fn plane_bytes(&self, p: usize) -> Vec<u8> {
        self.planes[p].iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn plane_byte_len(&self) -> usize {
        words_per_plane(self.count) * 8
    }

    /// Append a serialized plane. Fails on a length that is not exactly one
    /// plane of whole words, or when the set is already complete.
    pub fn push_plane_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if self.planes.len() >= self.depth as usize {
            return Err(Error::CorruptPayload(format!(
                "more than {} planes supplied",
                self.depth
            )));
        }
        let want = self.plane_byte_len();
        if bytes.len() != want {
            return Err(Error::ShortInput(format!(
                "plane {} has {} bytes, expected {want}",
                self.planes.len(),
                bytes.len()
            )));
        }
        let words = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.planes.push(words);
        Ok(())
    }

    /// Planes from a concatenated MSB-first byte stream; trailing bytes that
    /// do not make up a whole plane are an error.
    pub fn from_bytes(
        layout: Layout,
        depth: u32,
        count: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        let mut set = BitplaneSet::empty(layout, depth, count);
        let plane_len = set.plane_byte_len();
        if plane_len == 0 {
            return Ok(set);
        }
        if !bytes.len().is_multiple_of(plane_len) {
            return Err(Error::ShortInput(format!(
                "{} bytes is not a whole number of {plane_len}-byte planes",
                bytes.len()
            )));
        }
        for chunk in bytes.chunks_exact(plane_len) {
            set.push_plane_bytes(chunk)?;
        }
        Ok(set)
    }

    /// Keep only the first `k` planes.
    pub fn truncate(&mut self, k: usize) {
        self.planes.truncate(k);
    }
}

/// Transpose negabinary digit strings into `depth` MSB-first planes.
pub fn encode_digits(digits: &[u128], depth: u32, layout: Layout) -> BitplaneSet {
    let count = digits.len();
    let words = words_per_plane(count);
    let perm = LayoutPermutation::new(layout, depth);
    let mut planes = vec![vec![0u64; words]; depth as usize];
    let mut gathered = [0u128; WORD_BITS];
    for w in 0..words {
        let start = w * WORD_BITS;
        let n = (count - start).min(WORD_BITS);
        for (j, slot) in gathered.iter_mut().enumerate().take(n) {
            *slot = digits[perm.source(start + j, count)];
        }
        for (p, plane) in planes.iter_mut().enumerate() {
            let digit = depth as usize - 1 - p;
            let mut word = 0u64;
            for (j, &d) in gathered.iter().enumerate().take(n) {
                word |= (((d >> digit) & 1) as u64) << j;
            }
            plane[w] = word;
        }
    }
    BitplaneSet {
        layout,
        depth,
        count,
        planes,
    }
}

pub fn encode(block: &FixedPointBlock, layout: Layout) -> BitplaneSet {
    encode_digits(&to_negabinary_block(&block.q), plane_count(block.bits), layout)
}

/// Digit strings rebuilt from the planes present; missing digits are 0.
pub fn decode_digits(set: &BitplaneSet) -> Result<Vec<u128>> {
    let count = set.count;
    let words = words_per_plane(count);
    if let Some((p, plane)) = set.planes.iter().enumerate().find(|(_, pl)| pl.len() != words) {
        return Err(Error::ShortInput(format!(
            "plane {p} has {} words, expected {words}",
            plane.len()
        )));
    }
    let perm = LayoutPermutation::new(set.layout, set.depth);
    let mut digits = vec![0u128; count];
    for (p, plane) in set.planes.iter().enumerate() {
        let digit = set.depth as usize - 1 - p;
        for (w, &word) in plane.iter().enumerate() {
            if word == 0 {
                continue;
            }
            let start = w * WORD_BITS;
            let n = (count - start).min(WORD_BITS);
            for j in 0..n {
                if (word >> j) & 1 == 1 {
                    digits[perm.source(start + j, count)] |= 1u128 << digit;
                }
            }
        }
    }
    Ok(digits)
}

/// Fixed-point integers rebuilt from the planes present.
pub fn decode_fixed(set: &BitplaneSet) -> Result<Vec<i128>> {
    Ok(decode_digits(set)?.into_iter().map(from_negabinary).collect())
}

/// Largest magnitude the `j` least significant negabinary digits can hold.
pub fn dropped_digit_max(j: u32) -> u128 {
    ((1u128 << (j + 1)) - 1) / 3
}

/// Guaranteed `|v - v_hat|` after decoding the `k` leading planes of a block
/// with exponent `e` and `B` fractional bits, in exact arithmetic.
pub fn decode_bound(exponent: i32, bits: u32, k: usize) -> f64 {
    let depth = plane_count(bits) as usize;
    let j = depth.saturating_sub(k) as u32;
    let units = dropped_digit_max(j) + 1;
    let mut scaled = units as f64;
    if (scaled as u128) < units {
        scaled = scaled.next_up();
    }
    scaled * pow2(exponent - bits as i32)
}

/// Extra error from evaluating `q * 2^(e - B)` in `T` when `q` may not fit
/// the significand.
fn rounding_slack<T: Real>(exponent: i32, bits: u32, bound: f64) -> f64 {
    if plane_count(bits) <= T::MANTISSA_DIGITS {
        0.0
    } else {
        (pow2(exponent) + bound) * pow2(-(T::MANTISSA_DIGITS as i32))
    }
}

/// Values from the leading planes of `set`, with the guaranteed error bound.
pub fn decode<T: Real>(set: &BitplaneSet, meta: &BlockMeta) -> Result<(Vec<T>, f64)> {
    if set.count != meta.count || set.depth != meta.depth() || set.layout != meta.layout {
        return Err(Error::ShapeMismatch(format!(
            "bitplane set ({} elements, depth {}) does not match block meta ({} elements, depth {})",
            set.count,
            set.depth,
            meta.count,
            meta.depth()
        )));
    }
    let q = decode_fixed(set)?;
    let block = FixedPointBlock {
        exponent: meta.exponent,
        bits: meta.bits,
        q,
    };
    let bound = decode_bound(meta.exponent, meta.bits, set.len());
    let bound = bound + rounding_slack::<T>(meta.exponent, meta.bits, bound);
    Ok((block.dequantize(), bound))
}

/// Fewest leading planes whose decode bound is within `tol`; the full depth
/// when no prefix reaches it.
pub fn bitplanes_needed(exponent: i32, bits: u32, tol: f64) -> usize {
    let depth = plane_count(bits) as usize;
    (0..=depth)
        .find(|&k| decode_bound(exponent, bits, k) <= tol)
        .unwrap_or(depth)
}
