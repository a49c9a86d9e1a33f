//! End-to-end workflows: the forward path split into pipeline stages, and
//! multi-stream retrieval run through the reconstruct graph.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bitplane::{self, BitplaneSet, Layout};
use crate::container::{
    write_stream, ByteSource, CompressedLevel, DecodedGroups, FetchPlan, MemorySource, ProgressiveReader,
    StreamMeta,
};
use crate::decomposer::{self, DecomposerKind, Grid};
use crate::error::{Error, Result};
use crate::lossless::{self, GroupingPolicy, Method};
use crate::pipeline::{
    build_reconstruct_graph, build_refactor_graph, execute, ExecutionTrace, PipelineGraph, Scheduler, Task, SLOTS,
};
use crate::scalar::{values_from_le_bytes, DType, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefactorConfig {
    pub bits: u32,
    pub policy: GroupingPolicy,
    pub layout: Layout,
    pub decomposer: DecomposerKind,
}

impl Default for RefactorConfig {
    fn default() -> Self {
        RefactorConfig {
            bits: 32,
            policy: GroupingPolicy::default(),
            layout: Layout::InterleavedTile,
            decomposer: DecomposerKind::Hierarchical,
        }
    }
}

impl RefactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=64).contains(&self.bits) {
            return Err(Error::BadBitplaneCount(self.bits));
        }
        self.policy.validate()
    }

    fn meta(&self, dtype: DType, dims: &[usize]) -> StreamMeta {
        StreamMeta {
            dtype,
            dims: dims.to_vec(),
            decomposer: self.decomposer,
            layout: self.layout,
            bits: self.bits,
            group_size: self.policy.group_size,
        }
    }
}

/// One level after alignment and bitplane encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedLevel {
    pub exponent: i32,
    pub count: usize,
    pub planes: BitplaneSet,
}

/// Decompose, align and transpose into bitplanes.
pub fn encode_levels(values: &[f64], grid: &Grid, cfg: &RefactorConfig) -> Result<Vec<EncodedLevel>> {
    cfg.validate()?;
    let decomp = decomposer::decompose(values, grid, cfg.decomposer)?;
    decomp
        .levels()
        .iter()
        .map(|coeffs| {
            let block = bitplane::align_fixed_point(coeffs, cfg.bits)?;
            Ok(EncodedLevel {
                exponent: block.exponent,
                count: block.count(),
                planes: bitplane::encode(&block, cfg.layout),
            })
        })
        .collect()
}

/// Hybrid lossless coding of every level's plane groups.
pub fn compress_levels(levels: &[EncodedLevel], policy: &GroupingPolicy) -> Result<Vec<CompressedLevel>> {
    let m = policy.group_size as usize;
    levels
        .iter()
        .map(|level| {
            let segments = lossless::hybrid_compress(&level.planes, policy)?;
            Ok(CompressedLevel {
                exponent: level.exponent,
                count: level.count,
                groups: segments.into_iter().step_by(m.max(1)).collect(),
            })
        })
        .collect()
}

/// Widen raw little-endian input to the f64 working type.
pub fn values_from_raw(raw: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => values_from_le_bytes::<f32>(raw).into_iter().map(f64::from).collect(),
        DType::F64 => values_from_le_bytes::<f64>(raw),
    }
}

/// Round working values to what the stream's dtype can hold.
pub fn narrow(values: Vec<f64>, dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
        DType::F64 => values,
    }
}

pub fn values_to_raw(values: &[f64], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        DType::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn check_raw_len(raw: &[u8], dtype: DType, dims: &[usize]) -> Result<Grid> {
    let grid = Grid::new(dims.to_vec())?;
    let expect = grid.len() as u64 * dtype.size() as u64;
    if raw.len() as u64 != expect {
        return Err(Error::ShapeMismatch(format!(
            "input has {} bytes, dims {:?} of {dtype} need {expect}",
            raw.len(),
            dims
        )));
    }
    Ok(grid)
}

/// Per-stream refactor statistics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefactorSummary {
    pub raw_bytes: u64,
    pub stored_bytes: u64,
    pub levels: usize,
    pub bits: u32,
    /// Group counts for Huffman, RLE and DirectCopy.
    pub methods: [usize; 3],
}

impl RefactorSummary {
    fn new(raw_bytes: u64, stored: &[u8], levels: &[CompressedLevel], bits: u32) -> Self {
        let mut methods = [0usize; 3];
        for seg in levels.iter().flat_map(|l| &l.groups) {
            methods[seg.method.tag() as usize] += 1;
        }
        RefactorSummary {
            raw_bytes,
            stored_bytes: stored.len() as u64,
            levels: levels.len(),
            bits,
            methods,
        }
    }

    /// `H:<n>/R:<n>/D:<n>`.
    pub fn methods_histogram(&self) -> String {
        [Method::Huffman, Method::Rle, Method::DirectCopy]
            .iter()
            .zip(self.methods)
            .map(|(m, n)| format!("{}:{n}", m.short_name()))
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Single-shot refactor of a typed array into stream bytes.
pub fn refactor<T: Real>(data: &[T], dims: &[usize], cfg: &RefactorConfig) -> Result<Vec<u8>> {
    let grid = Grid::new(dims.to_vec())?;
    if data.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!("{} values for dims {:?}", data.len(), dims)));
    }
    let values: Vec<f64> = data.iter().map(|v| v.to_f64_exact()).collect();
    let encoded = encode_levels(&values, &grid, cfg)?;
    let compressed = compress_levels(&encoded, &cfg.policy)?;
    let mut out = Vec::new();
    write_stream(&cfg.meta(T::DTYPE, dims), &compressed, &mut out)?;
    Ok(out)
}

/// Where chunk inputs come from and where streams go.
pub trait ChunkIo: Sync {
    fn load(&self, chunk: usize) -> Result<Vec<u8>>;
    fn store(&self, chunk: usize, stream: Vec<u8>) -> Result<()>;
}

/// In-memory inputs; outputs are collected.
pub struct MemoryIo {
    pub inputs: Vec<Vec<u8>>,
    pub outputs: Mutex<Vec<Option<Vec<u8>>>>,
}

impl MemoryIo {
    pub fn new(inputs: Vec<Vec<u8>>) -> Self {
        let n = inputs.len();
        MemoryIo {
            inputs,
            outputs: Mutex::new(vec![None; n]),
        }
    }

    pub fn into_outputs(self) -> Vec<Option<Vec<u8>>> {
        self.outputs.into_inner().unwrap()
    }
}

impl ChunkIo for MemoryIo {
    fn load(&self, chunk: usize) -> Result<Vec<u8>> {
        self.inputs
            .get(chunk)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no input for chunk {chunk}")))
    }

    fn store(&self, chunk: usize, stream: Vec<u8>) -> Result<()> {
        self.outputs.lock().unwrap()[chunk] = Some(stream);
        Ok(())
    }
}

#[derive(Default)]
struct RefactorSlot {
    raw: Option<Vec<u8>>,
    encoded: Option<Vec<EncodedLevel>>,
    compressed: Option<Vec<CompressedLevel>>,
}

fn take<T>(slot: &mut Option<T>, task: &Task) -> Result<T> {
    slot.take().ok_or_else(|| Error::StageFailure {
        chunk: task.chunk,
        stage: task.label,
        source: Box::new(Error::Config("input buffer empty".into())),
    })
}

/// Refactor `num_chunks` same-shaped variables through the refactor graph.
pub fn refactor_chunks<IO: ChunkIo>(
    io: &IO,
    num_chunks: usize,
    dtype: DType,
    dims: &[usize],
    cfg: &RefactorConfig,
    scheduler: Scheduler,
) -> Result<(Vec<RefactorSummary>, ExecutionTrace, PipelineGraph)> {
    cfg.validate()?;
    let grid = Grid::new(dims.to_vec())?;
    let graph = build_refactor_graph(num_chunks)?;
    let slots: Vec<Mutex<RefactorSlot>> = (0..SLOTS).map(|_| Mutex::new(RefactorSlot::default())).collect();
    let summaries: Mutex<Vec<Option<RefactorSummary>>> = Mutex::new(vec![None; num_chunks]);
    let meta = cfg.meta(dtype, dims);

    let run = |task: &Task| -> Result<()> {
        let slot = &slots[task.slot()];
        match task.stage {
            0 => {
                let raw = io.load(task.chunk)?;
                check_raw_len(&raw, dtype, dims)?;
                slot.lock().unwrap().raw = Some(raw);
            }
            1 => {
                let raw = take(&mut slot.lock().unwrap().raw, task)?;
                let encoded = encode_levels(&values_from_raw(&raw, dtype), &grid, cfg)?;
                let mut s = slot.lock().unwrap();
                s.raw = Some(raw);
                s.encoded = Some(encoded);
            }
            2 => {
                let encoded = take(&mut slot.lock().unwrap().encoded, task)?;
                let compressed = compress_levels(&encoded, &cfg.policy)?;
                slot.lock().unwrap().compressed = Some(compressed);
            }
            _ => {
                let (raw, compressed) = {
                    let mut s = slot.lock().unwrap();
                    (take(&mut s.raw, task)?, take(&mut s.compressed, task)?)
                };
                let mut out = Vec::new();
                write_stream(&meta, &compressed, &mut out)?;
                let summary = RefactorSummary::new(raw.len() as u64, &out, &compressed, cfg.bits);
                io.store(task.chunk, out)?;
                summaries.lock().unwrap()[task.chunk] = Some(summary);
            }
        }
        Ok(())
    };
    let trace = execute(&graph, &run, scheduler)?;
    let summaries = summaries
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every chunk serialized"))
        .collect();
    Ok((summaries, trace, graph))
}

#[derive(Default)]
struct ReconstructSlot {
    fetched: Option<DecodedGroups>,
    values: Option<Vec<f64>>,
}

/// Outcome of one pass of the reconstruct graph.
pub struct Reconstruction {
    /// Per stream, rounded to the stream dtype.
    pub values: Vec<Vec<f64>>,
    /// Payload bytes read in this pass.
    pub bytes: u64,
    pub trace: ExecutionTrace,
}

/// Apply one plan per stream and rebuild every stream's values, with the
/// fetch of stream `k+1` overlapping the recomposition of stream `k`.
pub fn reconstruct_chunks<S: ByteSource + Send>(
    readers: &[Mutex<ProgressiveReader<S>>],
    plans: &[FetchPlan],
    scheduler: Scheduler,
) -> Result<Reconstruction> {
    if plans.len() != readers.len() {
        return Err(Error::ShapeMismatch(format!("{} plans for {} streams", plans.len(), readers.len())));
    }
    let graph = build_reconstruct_graph(readers.len())?;
    let slots: Vec<Mutex<ReconstructSlot>> = (0..SLOTS).map(|_| Mutex::new(ReconstructSlot::default())).collect();
    let outputs: Mutex<Vec<Option<Vec<f64>>>> = Mutex::new(vec![None; readers.len()]);
    let bytes = Mutex::new(0u64);

    let run = |task: &Task| -> Result<()> {
        let slot = &slots[task.slot()];
        let reader = &readers[task.chunk];
        match task.stage {
            0 => {
                let fetched = reader.lock().unwrap().read_groups(&plans[task.chunk])?;
                *bytes.lock().unwrap() += fetched.bytes;
                slot.lock().unwrap().fetched = Some(fetched.decode()?);
            }
            1 => {
                let decoded = take(&mut slot.lock().unwrap().fetched, task)?;
                reader.lock().unwrap().apply(decoded)?;
            }
            2 => {
                let (values, _) = reader.lock().unwrap().reconstruct_f64()?;
                slot.lock().unwrap().values = Some(values);
            }
            _ => {
                let values = take(&mut slot.lock().unwrap().values, task)?;
                let dtype = reader.lock().unwrap().header().dtype;
                outputs.lock().unwrap()[task.chunk] = Some(narrow(values, dtype));
            }
        }
        Ok(())
    };
    let trace = execute(&graph, &run, scheduler)?;
    Ok(Reconstruction {
        values: outputs
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|v| v.expect("every chunk emitted"))
            .collect(),
        bytes: bytes.into_inner().unwrap(),
        trace,
    })
}

/// Single-stream retrieval at `tau` from bytes in memory.
pub fn retrieve(stream: Vec<u8>, tau: f64) -> Result<(Vec<f64>, ProgressiveReader<MemorySource>, FetchPlan)> {
    let mut reader = ProgressiveReader::open(MemorySource::new(stream))?;
    let plan = reader.plan(tau);
    reader.fetch(&plan)?;
    let (values, _) = reader.reconstruct_f64()?;
    let dtype = reader.header().dtype;
    Ok((narrow(values, dtype), reader, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::values_to_le_bytes;

    fn field(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 * 0.37 + seed as f64).sin() * 3.0 + (i % 7) as f64 * 0.01)
            .collect()
    }

    #[test]
    fn full_retrieval_is_fixed_point_exact() {
        let dims = [9, 7];
        let data = field(63, 1);
        let cfg = RefactorConfig::default();
        let stream = refactor(&data, &dims, &cfg).unwrap();
        let (values, reader, plan) = retrieve(stream, 0.0).unwrap();
        assert!(plan.unreachable);
        let encoded = encode_levels(&data, &Grid::new(dims.to_vec()).unwrap(), &cfg).unwrap();
        let fixed = reader.fixed_point().unwrap();
        for (level, q) in encoded.iter().zip(&fixed) {
            assert_eq!(&bitplane::decode_fixed(&level.planes).unwrap(), q);
        }
        let bound = reader.state().bound;
        for (a, b) in data.iter().zip(&values) {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn tolerance_is_met() {
        let dims = [33];
        let data = field(33, 2);
        for layout in [Layout::SequentialBlock, Layout::InterleavedTile] {
            let cfg = RefactorConfig {
                layout,
                ..Default::default()
            };
            let stream = refactor(&data, &dims, &cfg).unwrap();
            for tau in [1e-1, 1e-3, 1e-6] {
                let (values, reader, plan) = retrieve(stream.clone(), tau).unwrap();
                assert!(!plan.unreachable);
                assert!(reader.state().bound <= tau);
                let err = data.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= tau, "{err} > {tau}");
            }
        }
    }

    #[test]
    fn schedulers_agree() {
        let dims = [17, 5];
        let inputs: Vec<Vec<u8>> = (0..4)
            .map(|s| values_to_le_bytes(&field(85, s).iter().map(|&v| v as f32).collect::<Vec<_>>()))
            .collect();
        let cfg = RefactorConfig::default();
        let mut outs = Vec::new();
        for sched in [Scheduler::Pipelined, Scheduler::Sequential] {
            let io = MemoryIo::new(inputs.clone());
            let (summaries, _, _) = refactor_chunks(&io, 4, DType::F32, &dims, &cfg, sched).unwrap();
            assert_eq!(summaries.len(), 4);
            outs.push(io.into_outputs());
        }
        assert_eq!(outs[0], outs[1]);
        let direct = refactor(&values_from_le_bytes::<f32>(&inputs[2]), &dims, &cfg).unwrap();
        assert_eq!(outs[0][2].as_ref().unwrap(), &direct);

        let mut recon = Vec::new();
        for sched in [Scheduler::Pipelined, Scheduler::Sequential] {
            let readers: Vec<_> = outs[0]
                .iter()
                .map(|s| Mutex::new(ProgressiveReader::open(MemorySource::new(s.clone().unwrap())).unwrap()))
                .collect();
            let plans: Vec<_> = readers.iter().map(|r| r.lock().unwrap().plan(1e-3)).collect();
            recon.push(reconstruct_chunks(&readers, &plans, sched).unwrap().values);
        }
        assert_eq!(recon[0], recon[1]);
    }

    #[test]
    fn wrong_input_size_fails() {
        let io = MemoryIo::new(vec![vec![0u8; 12]]);
        let err = refactor_chunks(&io, 1, DType::F32, &[4], &RefactorConfig::default(), Scheduler::Pipelined)
            .unwrap_err();
        assert!(matches!(err, Error::StageFailure { chunk: 0, stage: "I", .. }));
        assert!(io.into_outputs()[0].is_none());
    }
}
