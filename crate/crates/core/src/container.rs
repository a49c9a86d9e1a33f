//! Refactored stream format, byte-range sources and the retrieval planner.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HPMDR1" | version u16 | dtype u8 | ndims u8 | dims u64 * ndims
//! decomposer u8 | layout u8 | B u8 | m u8 | level_count u32
//! per level:  e i16 | count u64 | per group: method u8, raw u64, comp u64, offset u64
//! payloads, level-major, most significant group first
//! ```
//!
//! A level with `count > 0` has `ceil((B + 2) / m)` groups, otherwise none.
//! Offsets are absolute file positions.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bitplane::{self, plane_count, BitplaneSet, BlockMeta, Layout};
use crate::decomposer::{self, allocate_level_tolerances, DecomposerKind, Grid, LevelDecomposition};
use crate::error::{Error, Result};
use crate::lossless::{self, group_count, Method, Segment};
use crate::scalar::{pow2, DType, Real};

pub const MAGIC: &[u8; 6] = b"HPMDR1";
pub const VERSION: u16 = 1;
const GROUP_ENTRY_BYTES: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub method: Method,
    pub raw_size: u64,
    pub comp_size: u64,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub exponent: i16,
    pub count: u64,
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub version: u16,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub decomposer: DecomposerKind,
    pub layout: Layout,
    pub bits: u8,
    pub group_size: u8,
    pub levels: Vec<LevelEntry>,
}

impl StreamHeader {
    pub fn depth(&self) -> u32 {
        plane_count(self.bits as u32)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims.iter().map(|&d| d as usize).collect())
    }

    pub fn element_count(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn groups_per_level(&self, count: u64) -> usize {
        if count == 0 {
            0
        } else {
            group_count(self.depth(), self.group_size as u32)
        }
    }

    pub fn encoded_len(&self) -> usize {
        let fixed = 6 + 2 + 1 + 1 + 8 * self.dims.len() + 4 + 4;
        fixed
            + self
                .levels
                .iter()
                .map(|l| 10 + GROUP_ENTRY_BYTES * l.groups.len())
                .sum::<usize>()
    }

    /// Sum of stored payload bytes.
    pub fn payload_len(&self) -> u64 {
        self.levels
            .iter()
            .flat_map(|l| &l.groups)
            .map(|g| g.comp_size)
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.id());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.decomposer.id());
        out.push(self.layout.id());
        out.push(self.bits);
        out.push(self.group_size);
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&level.exponent.to_le_bytes());
            out.extend_from_slice(&level.count.to_le_bytes());
            for g in &level.groups {
                out.push(g.method.tag());
                out.extend_from_slice(&g.raw_size.to_le_bytes());
                out.extend_from_slice(&g.comp_size.to_le_bytes());
                out.extend_from_slice(&g.offset.to_le_bytes());
            }
        }
        out
    }

    /// Structural checks a reader relies on.
    pub fn validate(&self, stream_len: Option<u64>) -> Result<()> {
        let bad = |m: String| Err(Error::BadStream(m));
        if self.dims.is_empty() || self.dims.len() > 255 {
            return bad(format!("{} dimensions", self.dims.len()));
        }
        if !(1..=64).contains(&self.bits) {
            return bad(format!("bitplane count {}", self.bits));
        }
        if self.group_size == 0 {
            return bad("group size 0".into());
        }
        let grid = self.grid().map_err(|e| Error::BadStream(e.to_string()))?;
        let sizes = decomposer::level_sizes(&grid, self.decomposer);
        if sizes.len() != self.levels.len() {
            return bad(format!(
                "{} levels stored, decomposer implies {}",
                self.levels.len(),
                sizes.len()
            ));
        }
        let depth = self.depth() as u64;
        let mut next = self.encoded_len() as u64;
        for (l, (level, &size)) in self.levels.iter().zip(&sizes).enumerate() {
            if level.count != size as u64 {
                return bad(format!("level {l} stores {} values, expected {size}", level.count));
            }
            if level.groups.len() != self.groups_per_level(level.count) {
                return bad(format!("level {l} has {} groups", level.groups.len()));
            }
            let plane_bytes = bitplane::words_per_plane(level.count as usize) as u64 * 8;
            for (g, entry) in level.groups.iter().enumerate() {
                let planes = lossless::group_planes(depth as u32, self.group_size as u32, g);
                if entry.raw_size != planes.len() as u64 * plane_bytes {
                    return bad(format!("level {l} group {g} raw size {}", entry.raw_size));
                }
                if entry.offset < next {
                    return bad(format!("level {l} group {g} overlaps the previous segment"));
                }
                next = entry
                    .offset
                    .checked_add(entry.comp_size)
                    .ok_or_else(|| Error::BadStream("offset overflow".into()))?;
            }
        }
        if let Some(len) = stream_len {
            if next > len {
                return bad(format!("segments end at {next}, stream has {len} bytes"));
            }
        }
        Ok(())
    }
}

/// Random-access byte source: files, memory, or anything with range reads.
pub trait ByteSource {
    fn len(&mut self) -> Result<u64>;
    fn read_at(&mut self, offset: u64, len: usize) -> Result<Vec<u8>>;
}

impl<S: ByteSource + ?Sized> ByteSource for Box<S> {
    fn len(&mut self) -> Result<u64> {
        (**self).len()
    }

    fn read_at(&mut self, offset: u64, len: usize) -> Result<Vec<u8>> {
        (**self).read_at(offset, len)
    }
}

#[derive(Clone, Debug)]
pub struct MemorySource {
    bytes: Arc<[u8]>,
}

impl MemorySource {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Self {
        MemorySource {
            bytes: bytes.into(),
        }
    }
}

impl ByteSource for MemorySource {
    fn len(&mut self) -> Result<u64> {
        Ok(self.bytes.len() as u64)
    }

    fn read_at(&mut self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let start = offset as usize;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ShortInput(format!("read of {len} bytes at {offset} past end")))?;
        Ok(self.bytes[start..end].to_vec())
    }
}

pub struct FileSource {
    file: File,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(FileSource {
            file: File::open(path)?,
        })
    }
}

impl ByteSource for FileSource {
    fn len(&mut self) -> Result<u64> {
        Ok(self.file.metadata()?.len())
    }

    fn read_at(&mut self, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len];
        self.file.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::ShortInput(format!("read of {len} bytes at {offset} past end"))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }
}

/// Wraps a source and counts the bytes it hands out.
pub struct CountingSource<S> {
    inner: S,
    counter: Arc<AtomicU64>,
}

impl<S> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        CountingSource {
            inner,
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        self.counter.clone()
    }
}

impl<S: ByteSource> ByteSource for CountingSource<S> {
    fn len(&mut self) -> Result<u64> {
        self.inner.len()
    }

    fn read_at(&mut self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let out = self.inner.read_at(offset, len)?;
        self.counter.fetch_add(out.len() as u64, Ordering::Relaxed);
        Ok(out)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::ShortInput("stream header truncated".into()));
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the header with a handful of small range reads.
pub fn read_header<S: ByteSource + ?Sized>(source: &mut S) -> Result<StreamHeader> {
    let stream_len = source.len()?;
    let fixed = source.read_at(0, 10.min(stream_len as usize))?;
    let mut c = Cursor { bytes: &fixed, at: 0 };
    if c.take(6)? != MAGIC {
        return Err(Error::BadStream("bad magic".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::BadStream(format!("unsupported version {version}")));
    }
    let dtype = DType::from_id(c.u8()?).ok_or_else(|| Error::BadStream("unknown dtype".into()))?;
    let ndims = c.u8()? as usize;

    let mid_len = 8 * ndims + 8;
    let mid = source.read_at(10, mid_len)?;
    let mut c = Cursor { bytes: &mid, at: 0 };
    let dims = (0..ndims).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let decomposer = DecomposerKind::from_id(c.u8()?)
        .ok_or_else(|| Error::BadStream("unknown decomposer id".into()))?;
    let layout = Layout::from_id(c.u8()?).ok_or_else(|| Error::BadStream("unknown layout id".into()))?;
    let bits = c.u8()?;
    let group_size = c.u8()?;
    let level_count = c.u32()? as usize;
    if !(1..=64).contains(&bits) || group_size == 0 {
        return Err(Error::BadStream(format!("bits {bits}, group size {group_size}")));
    }
    let groups_full = group_count(plane_count(bits as u32), group_size as u32);

    let mut at = 10 + mid_len as u64;
    let mut levels = Vec::with_capacity(level_count.min(1 << 16));
    for _ in 0..level_count {
        let head = source.read_at(at, 10)?;
        at += 10;
        let mut c = Cursor { bytes: &head, at: 0 };
        let exponent = c.i16()?;
        let count = c.u64()?;
        let n_groups = if count == 0 { 0 } else { groups_full };
        let table = source.read_at(at, n_groups * GROUP_ENTRY_BYTES)?;
        at += table.len() as u64;
        let mut c = Cursor { bytes: &table, at: 0 };
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            groups.push(GroupEntry {
                method: Method::from_tag(c.u8()?)?,
                raw_size: c.u64()?,
                comp_size: c.u64()?,
                offset: c.u64()?,
            });
        }
        levels.push(LevelEntry {
            exponent,
            count,
            groups,
        });
    }
    let header = StreamHeader {
        version,
        dtype,
        dims,
        decomposer,
        layout,
        bits,
        group_size,
        levels,
    };
    header.validate(Some(stream_len))?;
    Ok(header)
}

/// Coded groups of one level, most significant first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedLevel {
    pub exponent: i32,
    pub count: usize,
    pub groups: Vec<Segment>,
}

/// Stream-wide settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamMeta {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub decomposer: DecomposerKind,
    pub layout: Layout,
    pub bits: u32,
    pub group_size: u32,
}

/// Build the header (with offsets) for a set of compressed levels.
pub fn build_header(meta: &StreamMeta, levels: &[CompressedLevel]) -> Result<StreamHeader> {
    if meta.dims.is_empty() || meta.dims.len() > 255 {
        return Err(Error::Config(format!("{} dimensions", meta.dims.len())));
    }
    if !(1..=64).contains(&meta.bits) {
        return Err(Error::BadBitplaneCount(meta.bits));
    }
    if !(1..=255).contains(&meta.group_size) {
        return Err(Error::Config(format!("group size {}", meta.group_size)));
    }
    let mut header = StreamHeader {
        version: VERSION,
        dtype: meta.dtype,
        dims: meta.dims.iter().map(|&d| d as u64).collect(),
        decomposer: meta.decomposer,
        layout: meta.layout,
        bits: meta.bits as u8,
        group_size: meta.group_size as u8,
        levels: Vec::with_capacity(levels.len()),
    };
    for level in levels {
        let exponent = i16::try_from(level.exponent)
            .map_err(|_| Error::Config(format!("exponent {} out of range", level.exponent)))?;
        header.levels.push(LevelEntry {
            exponent,
            count: level.count as u64,
            groups: level
                .groups
                .iter()
                .map(|s| GroupEntry {
                    method: s.method,
                    raw_size: s.raw_size,
                    comp_size: s.comp_size(),
                    offset: 0,
                })
                .collect(),
        });
    }
    let mut offset = header.encoded_len() as u64;
    for level in &mut header.levels {
        for g in &mut level.groups {
            g.offset = offset;
            offset += g.comp_size;
        }
    }
    header.validate(None)?;
    Ok(header)
}

/// Serialize a stream. Payloads follow the header contiguously in fetch
/// order.
pub fn write_stream<W: Write>(
    meta: &StreamMeta,
    levels: &[CompressedLevel],
    sink: &mut W,
) -> Result<StreamHeader> {
    let header = build_header(meta, levels)?;
    sink.write_all(&header.to_bytes())?;
    for level in levels {
        for seg in &level.groups {
            sink.write_all(&seg.payload)?;
        }
    }
    sink.flush()?;
    Ok(header)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    pub groups_loaded: usize,
    pub planes_decoded: usize,
    pub bound: f64,
}

/// Retrieval bookkeeping for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalState {
    pub levels: Vec<LevelState>,
    /// Guaranteed L-infinity error of the current reconstruction.
    pub bound: f64,
    pub bytes_read: u64,
}

/// Error bound of one level with `planes` leading planes decoded in f64.
pub fn level_bound(exponent: i32, bits: u32, count: u64, planes: usize) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let b = bitplane::decode_bound(exponent, bits, planes);
    if plane_count(bits) <= f64::MANTISSA_DIGITS {
        b
    } else {
        b + (pow2(exponent) + b) * pow2(-(f64::MANTISSA_DIGITS as i32))
    }
}

/// Extra error from narrowing the f64 reconstruction to the stream dtype,
/// given the sum of level bounds.
pub fn output_slack(header: &StreamHeader, level_sum: f64) -> f64 {
    let u = header.dtype.output_roundoff();
    if u == 0.0 {
        return 0.0;
    }
    // |v| < sum over levels of 2^e_l (interpolation is a convex combination)
    let magnitude: f64 = header
        .levels
        .iter()
        .filter(|l| l.count > 0)
        .map(|l| pow2(l.exponent as i32))
        .sum();
    u * (magnitude + level_sum)
}

impl RetrievalState {
    pub fn new(header: &StreamHeader) -> Self {
        let mut state = RetrievalState {
            levels: header
                .levels
                .iter()
                .map(|_| LevelState {
                    groups_loaded: 0,
                    planes_decoded: 0,
                    bound: 0.0,
                })
                .collect(),
            bound: 0.0,
            bytes_read: 0,
        };
        state.refresh(header);
        state
    }

    /// Recompute plane counts and bounds from `groups_loaded`.
    pub fn refresh(&mut self, header: &StreamHeader) {
        let depth = header.depth() as usize;
        let m = header.group_size as usize;
        for (ls, entry) in self.levels.iter_mut().zip(&header.levels) {
            ls.planes_decoded = (ls.groups_loaded * m).min(depth);
            ls.bound = level_bound(entry.exponent as i32, header.bits as u32, entry.count, ls.planes_decoded);
        }
        let sum: f64 = self.levels.iter().map(|l| l.bound).sum();
        self.bound = sum + output_slack(header, sum);
    }

    pub fn is_complete(&self, header: &StreamHeader) -> bool {
        self.levels
            .iter()
            .zip(&header.levels)
            .all(|(s, l)| s.groups_loaded >= l.groups.len())
    }
}

/// Additional groups to fetch per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchPlan {
    pub groups: Vec<usize>,
    /// Bound after the plan is applied.
    pub bound: f64,
    /// The tolerance cannot be met even with every group.
    pub unreachable: bool,
}

impl FetchPlan {
    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(|&g| g == 0)
    }

    pub fn total_groups(&self) -> usize {
        self.groups.iter().sum()
    }
}

/// Fewest additional groups meeting `tau`, splitting it uniformly over levels.
pub fn plan_retrieval(header: &StreamHeader, tau: f64, state: &RetrievalState) -> FetchPlan {
    let n_levels = header.levels.len().max(1);
    let u = header.dtype.output_roundoff();
    let magnitude = output_slack(header, 0.0);
    let budget = ((tau - magnitude) / (1.0 + u)).max(0.0);
    let per_level = allocate_level_tolerances(budget, n_levels);
    let m = header.group_size as usize;
    let mut target = state.clone();
    let mut groups = Vec::with_capacity(header.levels.len());
    for ((entry, ls), tol) in header.levels.iter().zip(&mut target.levels).zip(&per_level) {
        if entry.count == 0 {
            groups.push(0);
            continue;
        }
        let k = bitplane::bitplanes_needed(entry.exponent as i32, header.bits as u32, *tol);
        let need = k.div_ceil(m).min(entry.groups.len());
        let extra = need.saturating_sub(ls.groups_loaded);
        ls.groups_loaded += extra;
        groups.push(extra);
    }
    target.refresh(header);
    FetchPlan {
        groups,
        bound: target.bound,
        unreachable: target.bound > tau,
    }
}

/// Plan that adds `n` groups to every level that still has some.
pub fn plan_more_groups(header: &StreamHeader, state: &RetrievalState, n: usize) -> FetchPlan {
    let mut target = state.clone();
    let groups = header
        .levels
        .iter()
        .zip(&mut target.levels)
        .map(|(entry, ls)| {
            let extra = n.min(entry.groups.len() - ls.groups_loaded.min(entry.groups.len()));
            ls.groups_loaded += extra;
            extra
        })
        .collect();
    target.refresh(header);
    FetchPlan {
        groups,
        bound: target.bound,
        unreachable: false,
    }
}

/// Raw segments read for a plan, not yet decoded.
#[derive(Clone, Debug, Default)]
pub struct FetchedGroups {
    /// `(level, group index, segment)`.
    pub segments: Vec<(usize, usize, Segment)>,
    pub bytes: u64,
}

/// Decoded plane bytes for a plan.
#[derive(Clone, Debug, Default)]
pub struct DecodedGroups {
    pub groups: Vec<(usize, usize, Vec<u8>)>,
    pub bytes: u64,
}

impl FetchedGroups {
    /// Undo the lossless stage.
    pub fn decode(self) -> Result<DecodedGroups> {
        let groups = self
            .segments
            .into_iter()
            .map(|(l, g, seg)| seg.decode().map(|b| (l, g, b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodedGroups {
            groups,
            bytes: self.bytes,
        })
    }
}

/// Stream reader that accumulates planes across successive fetches.
pub struct ProgressiveReader<S> {
    source: S,
    header: StreamHeader,
    state: RetrievalState,
    planes: Vec<BitplaneSet>,
}

impl<S: ByteSource> ProgressiveReader<S> {
    pub fn open(mut source: S) -> Result<Self> {
        let header = read_header(&mut source)?;
        let state = RetrievalState::new(&header);
        let planes = header
            .levels
            .iter()
            .map(|l| BitplaneSet::empty(header.layout, header.depth(), l.count as usize))
            .collect();
        Ok(ProgressiveReader {
            source,
            header,
            state,
            planes,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn state(&self) -> &RetrievalState {
        &self.state
    }

    pub fn source_mut(&mut self) -> &mut S {
        &mut self.source
    }

    pub fn plan(&self, tau: f64) -> FetchPlan {
        plan_retrieval(&self.header, tau, &self.state)
    }

    /// Read the byte ranges of the planned segments, in file order.
    pub fn read_groups(&mut self, plan: &FetchPlan) -> Result<FetchedGroups> {
        if plan.groups.len() != self.header.levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "plan covers {} levels, stream has {}",
                plan.groups.len(),
                self.header.levels.len()
            )));
        }
        let mut fetched = FetchedGroups::default();
        for (l, (&extra, entry)) in plan.groups.iter().zip(&self.header.levels).enumerate() {
            let first = self.state.levels[l].groups_loaded;
            if first + extra > entry.groups.len() {
                return Err(Error::ShapeMismatch(format!(
                    "plan asks for group {} of level {l}, which has {}",
                    first + extra,
                    entry.groups.len()
                )));
            }
            for g in first..first + extra {
                let ge = entry.groups[g];
                let payload = self.source.read_at(ge.offset, ge.comp_size as usize)?;
                fetched.bytes += payload.len() as u64;
                fetched.segments.push((
                    l,
                    g,
                    Segment {
                        method: ge.method,
                        raw_size: ge.raw_size,
                        payload,
                    },
                ));
            }
        }
        Ok(fetched)
    }

    /// Append decoded groups; they must continue each level's prefix.
    pub fn apply(&mut self, decoded: DecodedGroups) -> Result<()> {
        let m = self.header.group_size as usize;
        for (l, g, bytes) in decoded.groups {
            let ls = &mut self.state.levels[l];
            if g != ls.groups_loaded {
                return Err(Error::CorruptPayload(format!(
                    "level {l}: group {g} arrived after {} groups",
                    ls.groups_loaded
                )));
            }
            let set = &mut self.planes[l];
            let plane_len = set.plane_byte_len();
            let expect = lossless::group_planes(self.header.depth(), m as u32, g).len() * plane_len;
            if bytes.len() != expect {
                return Err(Error::CorruptPayload(format!(
                    "level {l} group {g}: {} bytes, expected {expect}",
                    bytes.len()
                )));
            }
            for chunk in bytes.chunks_exact(plane_len) {
                set.push_plane_bytes(chunk)?;
            }
            ls.groups_loaded += 1;
        }
        self.state.bytes_read += decoded.bytes;
        self.state.refresh(&self.header);
        Ok(())
    }

    /// Read, decode and apply a plan; returns the payload bytes read.
    pub fn fetch(&mut self, plan: &FetchPlan) -> Result<u64> {
        let fetched = self.read_groups(plan)?;
        let bytes = fetched.bytes;
        self.apply(fetched.decode()?)?;
        Ok(bytes)
    }

    /// Coefficients of every level from the planes held so far.
    pub fn coefficients(&self) -> Result<Vec<Vec<f64>>> {
        self.header
            .levels
            .iter()
            .zip(&self.planes)
            .map(|(entry, set)| {
                let meta = BlockMeta {
                    exponent: entry.exponent as i32,
                    bits: self.header.bits as u32,
                    count: entry.count as usize,
                    layout: self.header.layout,
                };
                bitplane::decode::<f64>(set, &meta).map(|(v, _)| v)
            })
            .collect()
    }

    /// Fixed-point integers of every level from the planes held so far.
    pub fn fixed_point(&self) -> Result<Vec<Vec<i128>>> {
        self.planes.iter().map(bitplane::decode_fixed).collect()
    }

    /// Working-precision reconstruction and its guaranteed bound (without the
    /// narrowing allowance for f32 streams).
    pub fn reconstruct_f64(&self) -> Result<(Vec<f64>, f64)> {
        let grid = self.header.grid()?;
        let coeffs = self.coefficients()?;
        let decomp = LevelDecomposition::from_levels(grid, self.header.decomposer, coeffs)?;
        let errors: Vec<f64> = self.state.levels.iter().map(|l| l.bound).collect();
        decomposer::recompose(&decomp, &errors)
    }

    /// Reconstruction in `T` with the state's guaranteed bound.
    pub fn reconstruct<T: Real>(&self) -> Result<(Vec<T>, f64)> {
        let (values, _) = self.reconstruct_f64()?;
        Ok((
            values.into_iter().map(T::from_f64_round).collect(),
            self.state.bound,
        ))
    }

    /// Segments fetched so far, per level, for caching a session.
    pub fn snapshot(&mut self) -> Result<Vec<Vec<Segment>>> {
        let mut out = Vec::with_capacity(self.header.levels.len());
        for (entry, ls) in self.header.levels.iter().zip(&self.state.levels) {
            let mut level = Vec::with_capacity(ls.groups_loaded);
            for ge in &entry.groups[..ls.groups_loaded] {
                level.push(Segment {
                    method: ge.method,
                    raw_size: ge.raw_size,
                    payload: self.source.read_at(ge.offset, ge.comp_size as usize)?,
                });
            }
            out.push(level);
        }
        Ok(out)
    }

    /// Restore previously fetched segments without touching the source.
    pub fn restore(&mut self, cached: Vec<Vec<Segment>>, bytes_read: u64) -> Result<()> {
        if cached.len() != self.header.levels.len() {
            return Err(Error::ShapeMismatch("cached session has a different level count".into()));
        }
        if self.state.levels.iter().any(|l| l.groups_loaded > 0) {
            return Err(Error::Config("restore into a reader that already holds data".into()));
        }
        let mut decoded = DecodedGroups::default();
        for (l, level) in cached.into_iter().enumerate() {
            let entry = &self.header.levels[l];
            for (g, seg) in level.into_iter().enumerate() {
                let ge = entry.groups.get(g).ok_or_else(|| {
                    Error::CorruptPayload(format!("cached level {l} has too many groups"))
                })?;
                if seg.method != ge.method || seg.raw_size != ge.raw_size || seg.comp_size() != ge.comp_size {
                    return Err(Error::CorruptPayload(format!(
                        "cached level {l} group {g} does not match the stream"
                    )));
                }
                decoded.groups.push((l, g, seg.decode()?));
            }
        }
        decoded.bytes = bytes_read;
        self.apply(decoded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(count: usize, groups: usize, plane_bytes: u64, m: u64, depth: u64) -> CompressedLevel {
        CompressedLevel {
            exponent: 0,
            count,
            groups: (0..groups)
                .map(|g| {
                    let planes = (depth - g as u64 * m).min(m);
                    Segment {
                        method: Method::DirectCopy,
                        raw_size: planes * plane_bytes,
                        payload: vec![g as u8; (planes * plane_bytes) as usize],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn header_roundtrip() {
        let meta = StreamMeta {
            dtype: DType::F32,
            dims: vec![3, 3],
            decomposer: DecomposerKind::Hierarchical,
            layout: Layout::InterleavedTile,
            bits: 6,
            group_size: 4,
        };
        // 3x3 grid: level 0 has 4 nodes, level 1 has 5; depth 8 -> 2 groups
        let levels = vec![level(4, 2, 8, 4, 8), level(5, 2, 8, 4, 8)];
        let mut bytes = Vec::new();
        let written = write_stream(&meta, &levels, &mut bytes).unwrap();
        let mut src = MemorySource::new(bytes.clone());
        let read = read_header(&mut src).unwrap();
        assert_eq!(read, written);
        assert_eq!(bytes.len() as u64, read.encoded_len() as u64 + read.payload_len());
        assert_eq!(&bytes[..6], b"HPMDR1");
        let offsets: Vec<u64> = read.levels.iter().flat_map(|l| l.groups.iter().map(|g| g.offset)).collect();
        assert!(offsets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn level_count_must_match_grid() {
        let meta = StreamMeta {
            dtype: DType::F64,
            dims: vec![1],
            decomposer: DecomposerKind::Identity,
            layout: Layout::SequentialBlock,
            bits: 8,
            group_size: 4,
        };
        let err = write_stream(&meta, &[level(0, 0, 0, 4, 10)], &mut Vec::new()).unwrap_err();
        // a one-element grid still owns one value
        assert!(matches!(err, Error::BadStream(_)));
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let meta = StreamMeta {
            dtype: DType::F64,
            dims: vec![4],
            decomposer: DecomposerKind::Identity,
            layout: Layout::SequentialBlock,
            bits: 2,
            group_size: 4,
        };
        let mut bytes = Vec::new();
        write_stream(&meta, &[level(4, 1, 8, 4, 4)], &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_header(&mut MemorySource::new(bad)), Err(Error::BadStream(_))));
        let truncated = bytes[..bytes.len() - 1].to_vec();
        assert!(read_header(&mut MemorySource::new(truncated)).is_err());
        assert!(read_header(&mut MemorySource::new(bytes[..20].to_vec())).is_err());
    }

    #[test]
    fn planner_examples() {
        let header = StreamHeader {
            version: VERSION,
            dtype: DType::F64,
            dims: vec![100],
            decomposer: DecomposerKind::Identity,
            layout: Layout::SequentialBlock,
            bits: 32,
            group_size: 4,
            levels: vec![LevelEntry {
                exponent: 0,
                count: 100,
                groups: vec![
                    GroupEntry {
                        method: Method::DirectCopy,
                        raw_size: 0,
                        comp_size: 0,
                        offset: 0
                    };
                    9
                ],
            }],
        };
        let fresh = RetrievalState::new(&header);
        let plan = plan_retrieval(&header, 2f64.powi(-10), &fresh);
        assert_eq!(plan.groups, vec![3]);
        assert!(!plan.unreachable);
        assert!(plan.bound <= 2f64.powi(-10));

        assert_eq!(plan_retrieval(&header, f64::INFINITY, &fresh).groups, vec![0]);
        let all = plan_retrieval(&header, 0.0, &fresh);
        assert_eq!(all.groups, vec![9]);
        assert!(all.unreachable);
        assert_eq!(all.bound, 2f64.powi(-32));

        let mut partial = fresh.clone();
        partial.levels[0].groups_loaded = 2;
        partial.refresh(&header);
        assert_eq!(plan_retrieval(&header, 2f64.powi(-10), &partial).groups, vec![1]);
        partial.levels[0].groups_loaded = 5;
        partial.refresh(&header);
        assert_eq!(plan_retrieval(&header, 2f64.powi(-10), &partial).groups, vec![0]);
    }
}
