//! `pdr`: refactor raw arrays into progressive streams and retrieve them at a
//! chosen error tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pdr::bitplane::Layout;
use pdr::container::{read_header, FileSource, MemorySource, ProgressiveReader, StreamHeader};
use pdr::decomposer::DecomposerKind;
use pdr::lossless::{GroupingPolicy, Method, Segment};
use pdr::qoi::{self, progressive_qoi_retrieve, real_qoi_error, Strategy};
use pdr::refactor::{self, refactor_chunks, reconstruct_chunks, values_from_raw, values_to_raw, ChunkIo, RefactorConfig};
use pdr::synth::{self, FieldKind};
use pdr::{DType, Error, Scheduler};

const EXIT_CONFIG: u8 = 2;
const EXIT_CORRUPT: u8 = 3;
const EXIT_UNREACHABLE: u8 = 4;

#[derive(Parser)]
#[command(name = "pdr", version, about = "Precision-progressive refactoring of raw floating-point arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refactor raw arrays into one stream file each.
    Refactor(RefactorArgs),
    /// Reconstruct one stream at an L-infinity tolerance.
    Retrieve(RetrieveArgs),
    /// Reconstruct several streams until a QoI tolerance is met.
    QoiRetrieve(QoiArgs),
    /// Print a stream's header and group table.
    Inspect {
        input: PathBuf,
    },
    /// QoI strategy table over a synthetic velocity field.
    Bench(BenchArgs),
    /// Write a deterministic synthetic field as raw binary.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct CodecArgs {
    /// Fixed-point bits per value (B).
    #[arg(long, default_value_t = 32)]
    bits: u32,
    /// Bitplanes merged per group (m).
    #[arg(long, default_value_t = 4)]
    group_size: u32,
    /// Groups up to this many bytes are stored verbatim (T_s).
    #[arg(long, default_value_t = 1024)]
    size_threshold: u64,
    /// Minimum estimated compression ratio for Huffman or RLE (T_cr).
    #[arg(long, default_value_t = 1.0)]
    cr_threshold: f64,
    /// Store every group with one method: huffman, rle or copy.
    #[arg(long)]
    force_method: Option<String>,
    #[arg(long, default_value = "interleaved")]
    layout: Layout,
    #[arg(long, default_value = "hierarchical")]
    decomposer: DecomposerKind,
}

impl CodecArgs {
    fn config(&self) -> anyhow::Result<RefactorConfig> {
        let force = match self.force_method.as_deref() {
            None => None,
            Some("huffman") => Some(Method::Huffman),
            Some("rle") => Some(Method::Rle),
            Some("copy") => Some(Method::DirectCopy),
            Some(other) => return Err(Error::Config(format!("unknown method '{other}'")).into()),
        };
        let cfg = RefactorConfig {
            bits: self.bits,
            policy: GroupingPolicy {
                group_size: self.group_size,
                size_threshold: self.size_threshold,
                cr_threshold: self.cr_threshold,
                force,
            },
            layout: self.layout,
            decomposer: self.decomposer,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RefactorArgs {
    /// Raw input files, one per variable.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Stream files, one per input.
    #[arg(long = "output", required = true)]
    outputs: Vec<PathBuf>,
    /// Extents, slowest-varying first, e.g. 64,64,64.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[command(flatten)]
    codec: CodecArgs,
    /// on: pipelined scheduler; off: one task at a time.
    #[arg(long, default_value = "on")]
    pipeline: Scheduler,
    /// Write the execution trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    input: PathBuf,
    /// Absolute L-infinity tolerance; 0 requests full precision.
    #[arg(long)]
    tau: f64,
    /// Raw output in the stream's dtype.
    #[arg(long)]
    output: PathBuf,
    /// Original raw data, to report the real error.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Session file holding previously fetched groups; created or updated.
    #[arg(long)]
    resume_state: Option<PathBuf>,
    #[arg(long, default_value = "on")]
    pipeline: Scheduler,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct QoiArgs {
    /// Stream files, one per component.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Derived quantity; only vtotal (sum of squares) is available.
    #[arg(long, default_value = "vtotal")]
    qoi: String,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value = "mape")]
    strategy: String,
    #[arg(long, default_value_t = qoi::DEFAULT_MAPE_C)]
    mape_c: f64,
    /// Raw outputs, one per input.
    #[arg(long = "output")]
    outputs: Vec<PathBuf>,
    /// Original raw data, one file per input.
    #[arg(long = "ground-truth")]
    ground_truth: Vec<PathBuf>,
    #[arg(long, default_value = "on")]
    pipeline: Scheduler,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Absolute QoI tolerances; empty prints only the header.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "cp,ma,mape")]
    strategies: Vec<String>,
    #[arg(long, default_value_t = qoi::DEFAULT_MAPE_C)]
    mape_c: f64,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long, default_value = "on")]
    pipeline: Scheduler,
}

#[derive(Args)]
struct GenerateArgs {
    /// smooth, noise, mixed, or velocity (three outputs).
    #[arg(long)]
    kind: String,
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "output", required = true)]
    outputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Refactor(a) => cmd_refactor(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::QoiRetrieve(a) => cmd_qoi(a),
        Command::Inspect { input } => cmd_inspect(&input),
        Command::Bench(a) => cmd_bench(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_corruption() => EXIT_CORRUPT,
        Some(e) if matches!(e.root(), Error::UnreachableTolerance { .. }) => EXIT_UNREACHABLE,
        _ => EXIT_CONFIG,
    }
}

fn element_count(dims: &[usize]) -> anyhow::Result<u64> {
    pdr::decomposer::Grid::new(dims.to_vec())?;
    Ok(dims.iter().map(|&d| d as u64).product())
}

fn read_raw(path: &Path, dtype: DType, count: u64) -> anyhow::Result<Vec<f64>> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.len() as u64 != count * dtype.size() as u64 {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} bytes, expected {} values of {dtype}",
            path.display(),
            raw.len(),
            count
        ))
        .into());
    }
    Ok(values_from_raw(&raw, dtype))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct FileIo<'a> {
    inputs: &'a [PathBuf],
    outputs: &'a [PathBuf],
}

impl ChunkIo for FileIo<'_> {
    fn load(&self, chunk: usize) -> pdr::Result<Vec<u8>> {
        Ok(fs::read(&self.inputs[chunk])?)
    }

    fn store(&self, chunk: usize, stream: Vec<u8>) -> pdr::Result<()> {
        Ok(fs::write(&self.outputs[chunk], stream)?)
    }
}

fn cmd_refactor(a: RefactorArgs) -> anyhow::Result<ExitCode> {
    if a.inputs.len() != a.outputs.len() {
        bail!(Error::Config(format!("{} inputs but {} outputs", a.inputs.len(), a.outputs.len())));
    }
    let cfg = a.codec.config()?;
    let expect = element_count(&a.dims)? * a.dtype.size() as u64;
    for input in &a.inputs {
        let len = fs::metadata(input).with_context(|| format!("reading {}", input.display()))?.len();
        if len != expect {
            bail!(Error::ShapeMismatch(format!(
                "{} has {len} bytes; dims {:?} of {} need {expect}",
                input.display(),
                a.dims,
                a.dtype
            )));
        }
    }
    let io = FileIo {
        inputs: &a.inputs,
        outputs: &a.outputs,
    };
    let (summaries, trace, graph) = match refactor_chunks(&io, a.inputs.len(), a.dtype, &a.dims, &cfg, a.pipeline) {
        Ok(r) => r,
        Err(e) => {
            for out in &a.outputs {
                let _ = fs::remove_file(out);
            }
            return Err(e.into());
        }
    };
    if let Some(path) = &a.trace {
        fs::write(path, trace.to_csv(&graph))?;
    }
    for (input, s) in a.inputs.iter().zip(&summaries) {
        let name = input.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        println!(
            "{name},{},{},{},{},{}",
            s.raw_bytes,
            s.stored_bytes,
            s.levels,
            s.bits,
            s.methods_histogram()
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Fetched groups cached between `retrieve` runs.
#[derive(Serialize, Deserialize)]
struct Session {
    header: StreamHeader,
    bytes_read: u64,
    groups: Vec<Vec<CachedSegment>>,
}

#[derive(Serialize, Deserialize)]
struct CachedSegment {
    method: Method,
    raw_size: u64,
    payload: String,
}

fn load_session(path: &Path, header: &StreamHeader) -> anyhow::Result<Option<(Vec<Vec<Segment>>, u64)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let session: Session =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("resume state {}: {e}", path.display())))?;
    if &session.header != header {
        bail!(Error::Config(format!("resume state {} belongs to a different stream", path.display())));
    }
    let groups = session
        .groups
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|c| {
                    let payload = B64
                        .decode(c.payload)
                        .map_err(|e| Error::CorruptPayload(format!("resume state payload: {e}")))?;
                    Ok(Segment {
                        method: c.method,
                        raw_size: c.raw_size,
                        payload,
                    })
                })
                .collect::<pdr::Result<Vec<_>>>()
        })
        .collect::<pdr::Result<Vec<_>>>()?;
    Ok(Some((groups, session.bytes_read)))
}

fn save_session(path: &Path, reader: &mut ProgressiveReader<FileSource>) -> anyhow::Result<()> {
    let groups = reader
        .snapshot()?
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|s| CachedSegment {
                    method: s.method,
                    raw_size: s.raw_size,
                    payload: B64.encode(&s.payload),
                })
                .collect()
        })
        .collect();
    let session = Session {
        header: reader.header().clone(),
        bytes_read: reader.state().bytes_read,
        groups,
    };
    fs::write(path, serde_json::to_string(&session)?)?;
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> anyhow::Result<ExitCode> {
    if !(a.tau >= 0.0) {
        bail!(Error::Config(format!("tolerance {} must be non-negative", a.tau)));
    }
    let mut reader = ProgressiveReader::open(FileSource::open(&a.input)?)?;
    if let Some(path) = &a.resume_state {
        if let Some((groups, bytes)) = load_session(path, reader.header())? {
            reader.restore(groups, bytes)?;
        }
    }
    let plan = reader.plan(a.tau);
    let dtype = reader.header().dtype;
    let count = reader.header().element_count();
    let readers = [Mutex::new(reader)];
    let rec = reconstruct_chunks(&readers, std::slice::from_ref(&plan), a.pipeline)?;
    let [reader] = readers;
    let mut reader = reader.into_inner().unwrap();
    let values = &rec.values[0];
    fs::write(&a.output, values_to_raw(values, dtype))?;
    if let Some(path) = &a.trace {
        let graph = pdr::pipeline::build_reconstruct_graph(1)?;
        fs::write(path, rec.trace.to_csv(&graph))?;
    }
    if let Some(path) = &a.resume_state {
        save_session(path, &mut reader)?;
    }
    let state = reader.state();
    let mut line = format!("{:e},{},{:e}", a.tau, state.bytes_read, state.bound);
    if let Some(gt) = &a.ground_truth {
        let truth = read_raw(gt, dtype, count)?;
        line.push_str(&format!(",{:e}", max_abs_diff(&truth, values)));
    }
    println!("{line}");
    if a.tau > 0.0 && state.bound > a.tau {
        eprintln!("tolerance {:e} unreachable; achieved bound {:e}", a.tau, state.bound);
        return Ok(ExitCode::from(EXIT_UNREACHABLE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_qoi(a: QoiArgs) -> anyhow::Result<ExitCode> {
    if a.qoi != "vtotal" {
        bail!(Error::Config(format!("unknown QoI '{}'", a.qoi)));
    }
    let strategy = Strategy::parse(&a.strategy, a.mape_c)?;
    if !a.outputs.is_empty() && a.outputs.len() != a.inputs.len() {
        bail!(Error::Config("give one --output per --input".into()));
    }
    if !a.ground_truth.is_empty() && a.ground_truth.len() != a.inputs.len() {
        bail!(Error::Config("give one --ground-truth per --input".into()));
    }
    let readers = a
        .inputs
        .iter()
        .map(|p| ProgressiveReader::open(FileSource::open(p)?))
        .collect::<pdr::Result<Vec<_>>>()?;
    let dtype = readers[0].header().dtype;
    let count = readers[0].header().element_count();
    let out = match progressive_qoi_retrieve(readers, a.tau, strategy, a.pipeline) {
        Ok(out) => out,
        Err(e @ Error::UnreachableTolerance { .. }) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_UNREACHABLE));
        }
        Err(e) => return Err(e.into()),
    };
    for (path, values) in a.outputs.iter().zip(&out.values) {
        fs::write(path, values_to_raw(values, dtype))?;
    }
    let real = if a.ground_truth.is_empty() {
        String::new()
    } else {
        let truth = a
            .ground_truth
            .iter()
            .map(|p| read_raw(p, dtype, count))
            .collect::<anyhow::Result<Vec<_>>>()?;
        format!("{:e}", real_qoi_error(&truth, &out.values)?)
    };
    let s = &out.stats;
    println!(
        "{:e},{},{},{},{:.6},{:e},{real}",
        s.tau, s.strategy, s.iterations, s.bytes, s.bitrate, s.est_err
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(path: &Path) -> anyhow::Result<ExitCode> {
    let mut source = FileSource::open(path)?;
    let h = read_header(&mut source)?;
    let dims: Vec<String> = h.dims.iter().map(u64::to_string).collect();
    println!("magic HPMDR1 version {}", h.version);
    println!(
        "dtype {} dims {} decomposer {:?} layout {:?} B {} m {} levels {}",
        h.dtype,
        dims.join("x"),
        h.decomposer,
        h.layout,
        h.bits,
        h.group_size,
        h.levels.len()
    );
    for (l, level) in h.levels.iter().enumerate() {
        println!("level {l} e {} count {} groups {}", level.exponent, level.count, level.groups.len());
        for (g, ge) in level.groups.iter().enumerate() {
            println!(
                "  group {g} method {} raw {} comp {} offset {}",
                ge.method.short_name(),
                ge.raw_size,
                ge.comp_size,
                ge.offset
            );
        }
    }
    println!("header_bytes {} payload_bytes {}", h.encoded_len(), h.payload_len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let cfg = a.codec.config()?;
    let strategies = a
        .strategies
        .iter()
        .map(|s| Strategy::parse(s, a.mape_c))
        .collect::<pdr::Result<Vec<_>>>()?;
    println!("tau,strategy,iterations,bytes,bitrate,est_err,real_err,seconds");
    if a.taus.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    let truth: Vec<Vec<f64>> = synth::velocity_field(&a.dims, a.seed)?
        .into_iter()
        .map(|v| refactor::narrow(v, a.dtype))
        .collect();
    let streams = truth
        .iter()
        .map(|v| match a.dtype {
            DType::F32 => pdr::refactor(&v.iter().map(|&x| x as f32).collect::<Vec<_>>(), &a.dims, &cfg),
            DType::F64 => pdr::refactor(v, &a.dims, &cfg),
        })
        .collect::<pdr::Result<Vec<_>>>()?;
    for &tau in &a.taus {
        for &strategy in &strategies {
            let readers = streams
                .iter()
                .map(|s| ProgressiveReader::open(MemorySource::new(s.clone())))
                .collect::<pdr::Result<Vec<_>>>()?;
            let start = Instant::now();
            let out = progressive_qoi_retrieve(readers, tau, strategy, a.pipeline)?;
            let secs = start.elapsed().as_secs_f64();
            let real = real_qoi_error(&truth, &out.values)?;
            let s = &out.stats;
            println!(
                "{:e},{},{},{},{:.6},{:e},{:e},{secs:.4}",
                tau, s.strategy, s.iterations, s.bytes, s.bitrate, s.est_err, real
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<ExitCode> {
    let fields = if a.kind == "velocity" {
        synth::velocity_field(&a.dims, a.seed)?
    } else {
        let kind: FieldKind = a.kind.parse()?;
        vec![synth::generate(kind, &a.dims, a.seed)?]
    };
    if fields.len() != a.outputs.len() {
        return Err(anyhow!(Error::Config(format!(
            "kind '{}' writes {} file(s), got {} --output",
            a.kind,
            fields.len(),
            a.outputs.len()
        ))));
    }
    for (path, values) in a.outputs.iter().zip(&fields) {
        fs::write(path, values_to_raw(values, a.dtype))?;
    }
    Ok(ExitCode::SUCCESS)
}
