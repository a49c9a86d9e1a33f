//! Hybrid lossless coding of merged bitplane groups.
//!
//! Every `m` consecutive planes are concatenated plane-major into one group
//! and coded with Huffman, run-length or a plain copy. The method is chosen
//! from cheap compression-ratio estimates in a fixed order: groups at or
//! below the size threshold are copied; otherwise Huffman is used when its
//! estimate exceeds the ratio threshold, then RLE, then a copy.

pub mod huffman;
pub mod rle;

use serde::{Deserialize, Serialize};

use crate::bitplane::BitplaneSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Method {
    Huffman = 0,
    Rle = 1,
    DirectCopy = 2,
}

impl Method {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Method::Huffman),
            1 => Ok(Method::Rle),
            2 => Ok(Method::DirectCopy),
            other => Err(Error::UnknownMethodTag(other)),
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Method::Huffman => "H",
            Method::Rle => "R",
            Method::DirectCopy => "D",
        }
    }
}

/// One coded group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub method: Method,
    pub raw_size: u64,
    pub payload: Vec<u8>,
}

/// Bytes of the segment wire header: method, raw size, coded size.
pub const SEGMENT_HEADER_BYTES: usize = 17;

impl Segment {
    pub fn comp_size(&self) -> u64 {
        self.payload.len() as u64
    }

    /// Stand-in for the non-leading plane slots of a group.
    pub fn placeholder() -> Self {
        Segment {
            method: Method::DirectCopy,
            raw_size: 0,
            payload: Vec::new(),
        }
    }

    pub fn is_placeholder(&self) -> bool {
        self.raw_size == 0 && self.payload.is_empty()
    }

    pub fn encode(bytes: &[u8], method: Method) -> Result<Self> {
        let payload = match method {
            Method::Huffman => huffman::encode(bytes)?,
            Method::Rle => rle::encode(bytes),
            Method::DirectCopy => bytes.to_vec(),
        };
        Ok(Segment {
            method,
            raw_size: bytes.len() as u64,
            payload,
        })
    }

    pub fn decode(&self) -> Result<Vec<u8>> {
        let out = match self.method {
            Method::Huffman => huffman::decode(&self.payload)?,
            Method::Rle => rle::decode(&self.payload, self.raw_size as usize)?,
            Method::DirectCopy => self.payload.clone(),
        };
        if out.len() as u64 != self.raw_size {
            return Err(Error::CorruptPayload(format!(
                "segment decodes to {} bytes, expected {}",
                out.len(),
                self.raw_size
            )));
        }
        Ok(out)
    }

    /// `method: u8, raw_size: u64 LE, comp_size: u64 LE, payload`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEGMENT_HEADER_BYTES + self.payload.len());
        out.push(self.method.tag());
        out.extend_from_slice(&self.raw_size.to_le_bytes());
        out.extend_from_slice(&self.comp_size().to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse one segment from the front of `bytes`; returns it and the bytes
    /// consumed.
    pub fn from_wire(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < SEGMENT_HEADER_BYTES {
            return Err(Error::ShortInput("segment header truncated".into()));
        }
        let method = Method::from_tag(bytes[0])?;
        let raw_size = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let comp_size = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let end = SEGMENT_HEADER_BYTES
            .checked_add(comp_size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::ShortInput("segment payload truncated".into()))?;
        let payload = bytes[SEGMENT_HEADER_BYTES..end].to_vec();
        Ok((
            Segment {
                method,
                raw_size,
                payload,
            },
            end,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingPolicy {
    /// Planes merged per group (`m`).
    pub group_size: u32,
    /// Groups of at most this many bytes are copied (`T_s`).
    pub size_threshold: u64,
    /// Minimum estimated ratio for Huffman or RLE (`T_cr`).
    pub cr_threshold: f64,
    /// Bypass selection and code every group with one method.
    #[serde(default)]
    pub force: Option<Method>,
}

impl Default for GroupingPolicy {
    fn default() -> Self {
        GroupingPolicy {
            group_size: 4,
            size_threshold: 1024,
            cr_threshold: 1.0,
            force: None,
        }
    }
}

impl GroupingPolicy {
    pub fn forced(group_size: u32, method: Method) -> Self {
        GroupingPolicy {
            group_size,
            force: Some(method),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.group_size > 255 {
            return Err(Error::Config(format!(
                "group size {} outside 1..=255",
                self.group_size
            )));
        }
        if !(self.cr_threshold > 0.0) || !self.cr_threshold.is_finite() {
            return Err(Error::Config(format!(
                "compression-ratio threshold {} must be positive",
                self.cr_threshold
            )));
        }
        Ok(())
    }

    pub fn select(&self, group: &[u8]) -> Result<Method> {
        if let Some(m) = self.force {
            return Ok(m);
        }
        if group.len() as u64 <= self.size_threshold {
            return Ok(Method::DirectCopy);
        }
        if estimate_cr_huffman(group)? > self.cr_threshold {
            Ok(Method::Huffman)
        } else if estimate_cr_rle(group)? > self.cr_threshold {
            Ok(Method::Rle)
        } else {
            Ok(Method::DirectCopy)
        }
    }
}

/// Ratio of raw bits to Huffman code bits, ignoring the table.
pub fn estimate_cr_huffman(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hist = huffman::histogram(bytes);
    let bits = huffman::coded_bits(&hist, &huffman::code_lengths(&hist));
    Ok(8.0 * bytes.len() as f64 / bits as f64)
}

/// Ratio of raw bits to 16 bits per (capped) run.
pub fn estimate_cr_rle(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let runs = rle::count_runs(bytes);
    Ok(8.0 * bytes.len() as f64 / (16.0 * runs as f64))
}

pub fn group_count(depth: u32, group_size: u32) -> usize {
    depth.div_ceil(group_size) as usize
}

/// Planes held by group `g`.
pub fn group_planes(depth: u32, group_size: u32, g: usize) -> std::ops::Range<usize> {
    let start = g * group_size as usize;
    start..(start + group_size as usize).min(depth as usize)
}

/// Compress a complete bitplane set. The output has one entry per plane:
/// the group's segment in each group's leading slot and
/// [`Segment::placeholder`] elsewhere. An empty block yields no segments.
pub fn hybrid_compress(planes: &BitplaneSet, policy: &GroupingPolicy) -> Result<Vec<Segment>> {
    policy.validate()?;
    if planes.count() == 0 {
        return Ok(Vec::new());
    }
    let m = policy.group_size as usize;
    let present = planes.len();
    let mut out = Vec::with_capacity(present);
    for start in (0..present).step_by(m) {
        let end = (start + m).min(present);
        let mut group = Vec::with_capacity((end - start) * planes.plane_byte_len());
        for p in start..end {
            group.extend(planes.plane(p).iter().flat_map(|w| w.to_le_bytes()));
        }
        let method = policy.select(&group)?;
        out.push(Segment::encode(&group, method)?);
        out.extend((start + 1..end).map(|_| Segment::placeholder()));
    }
    Ok(out)
}

/// Leading segments only.
pub fn group_segments(segments: &[Segment]) -> Vec<&Segment> {
    segments.iter().filter(|s| !s.is_placeholder()).collect()
}

/// Append the planes of one decoded group to `set`.
pub fn append_group(set: &mut BitplaneSet, segment: &Segment, group_size: u32) -> Result<()> {
    let g = set.len().div_ceil(group_size as usize);
    if !set.len().is_multiple_of(group_size as usize) || g >= group_count(set.depth(), group_size) {
        return Err(Error::CorruptPayload(format!(
            "cannot append a group after {} of {} planes",
            set.len(),
            set.depth()
        )));
    }
    let planes = group_planes(set.depth(), group_size, g);
    let plane_len = set.plane_byte_len();
    let expect = (planes.len() * plane_len) as u64;
    if segment.raw_size != expect {
        return Err(Error::CorruptPayload(format!(
            "group {g} holds {} bytes, expected {expect}",
            segment.raw_size
        )));
    }
    let bytes = segment.decode()?;
    for chunk in bytes.chunks_exact(plane_len) {
        set.push_plane_bytes(chunk)?;
    }
    Ok(())
}

/// Planes rebuilt from a prefix of whole groups. `segments` may include the
/// placeholders produced by [`hybrid_compress`].
pub fn hybrid_decompress(
    segments: &[Segment],
    policy: &GroupingPolicy,
    template: &BitplaneSet,
) -> Result<BitplaneSet> {
    policy.validate()?;
    let mut set = BitplaneSet::empty(template.layout(), template.depth(), template.count());
    for seg in group_segments(segments) {
        append_group(&mut set, seg, policy.group_size)?;
    }
    Ok(set)
}

/// Planes delivered when `k` are requested: whole groups only.
pub fn planes_delivered(k: usize, depth: u32, group_size: u32) -> usize {
    (k.div_ceil(group_size as usize) * group_size as usize).min(depth as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitplane::{align_fixed_point, encode, Layout};

    #[test]
    fn huffman_estimates() {
        assert_eq!(estimate_cr_huffman(&[0u8; 256]).unwrap(), 8.0);
        let mut two = vec![0u8; 128];
        two.extend([0xFF; 128]);
        assert_eq!(estimate_cr_huffman(&two).unwrap(), 8.0);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(estimate_cr_huffman(&all).unwrap(), 1.0);
        assert!(matches!(estimate_cr_huffman(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn rle_estimates() {
        assert_eq!(estimate_cr_rle(&[3u8; 200]).unwrap(), 100.0);
        let alt: Vec<u8> = (0..256).map(|i| (i % 2) as u8).collect();
        assert_eq!(estimate_cr_rle(&alt).unwrap(), 0.5);
        assert_eq!(estimate_cr_rle(&[3u8; 256]).unwrap(), 64.0);
        assert!(matches!(estimate_cr_rle(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn huffman_segment_size_for_zeros() {
        let zeros = vec![0u8; 1 << 20];
        let seg = Segment::encode(&zeros, Method::Huffman).unwrap();
        assert!(seg.comp_size() <= seg.raw_size / 7);
        let est = estimate_cr_huffman(&zeros).unwrap();
        let predicted = seg.raw_size as f64 / est + huffman::HEADER_BYTES as f64;
        assert!((seg.comp_size() as f64 - predicted).abs() <= 0.01 * predicted);
        assert_eq!(seg.decode().unwrap(), zeros);
    }

    #[test]
    fn rle_segment_for_one_run() {
        let seg = Segment::encode(&[5u8; 200], Method::Rle).unwrap();
        assert_eq!(seg.payload.len(), 2);
    }

    #[test]
    fn selection_order() {
        let policy = GroupingPolicy::default();
        assert_eq!(policy.select(&[7u8; 64]).unwrap(), Method::DirectCopy);
        assert_eq!(policy.select(&vec![0u8; 1 << 20]).unwrap(), Method::Huffman);

        // 256 equiprobable symbols in long runs: Huffman ratio is exactly 1
        let runs: Vec<u8> = (0..1usize << 20).map(|i| (i / 4096) as u8).collect();
        assert_eq!(estimate_cr_huffman(&runs).unwrap(), 1.0);
        assert!(estimate_cr_rle(&runs).unwrap() > 50.0);
        assert_eq!(policy.select(&runs).unwrap(), Method::Rle);

        // incompressible: both estimates at or below 1
        let noise: Vec<u8> = (0..4096u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        if estimate_cr_huffman(&noise).unwrap() <= 1.0 {
            assert_eq!(policy.select(&noise).unwrap(), Method::DirectCopy);
        }
    }

    #[test]
    fn wire_roundtrip_and_unknown_tag() {
        let seg = Segment::encode(b"abcabcabc", Method::Rle).unwrap();
        let wire = seg.to_wire();
        let (back, used) = Segment::from_wire(&wire).unwrap();
        assert_eq!((back, used), (seg, wire.len()));
        let mut bad = wire.clone();
        bad[0] = 9;
        assert!(matches!(Segment::from_wire(&bad), Err(Error::UnknownMethodTag(9))));
        assert!(matches!(Segment::from_wire(&wire[..wire.len() - 1]), Err(Error::ShortInput(_))));
    }

    fn sample_planes(count: usize) -> BitplaneSet {
        let values: Vec<f64> = (0..count).map(|i| (i as f64 * 0.01).sin() * 3.0).collect();
        encode(&align_fixed_point(&values, 14).unwrap(), Layout::SequentialBlock)
    }

    #[test]
    fn compress_emits_placeholders() {
        let planes = sample_planes(5000);
        let segs = hybrid_compress(&planes, &GroupingPolicy::default()).unwrap();
        assert_eq!(segs.len(), 16);
        assert_eq!(group_segments(&segs).len(), 4);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.is_placeholder(), i % 4 != 0);
        }
        let back = hybrid_decompress(&segs, &GroupingPolicy::default(), &planes).unwrap();
        assert_eq!(back, planes);
    }

    #[test]
    fn decompress_prefix_rounds_to_groups() {
        let planes = sample_planes(700);
        let policy = GroupingPolicy::default();
        let segs = hybrid_compress(&planes, &policy).unwrap();
        let k: usize = 5;
        let groups = k.div_ceil(4);
        let prefix: Vec<Segment> = group_segments(&segs).into_iter().take(groups).cloned().collect();
        let got = hybrid_decompress(&prefix, &policy, &planes).unwrap();
        assert_eq!(got.len(), 8);
        assert_eq!(got.len(), planes_delivered(k, planes.depth(), 4));
        assert_eq!(got.planes(), &planes.planes()[..8]);
        let none = hybrid_decompress(&[], &policy, &planes).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn empty_block_has_no_groups() {
        let planes = encode(&align_fixed_point::<f64>(&[], 8).unwrap(), Layout::SequentialBlock);
        assert!(hybrid_compress(&planes, &GroupingPolicy::default()).unwrap().is_empty());
    }

    #[test]
    fn corrupt_segments_are_reported() {
        let planes = sample_planes(300);
        let policy = GroupingPolicy::forced(4, Method::Rle);
        let mut segs = hybrid_compress(&planes, &policy).unwrap();
        segs[0].raw_size += 1;
        assert!(hybrid_decompress(&segs, &policy, &planes).is_err());
    }
}
