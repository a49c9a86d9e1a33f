use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdr"))
        .args(args)
        .output()
        .expect("run pdr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = pdr(args);
    assert!(
        o.status.success(),
        "pdr {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn f32s(path: &Path) -> Vec<f32> {
    fs::read(path)
        .unwrap()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Generates a smooth 20x24 f32 field and its stream.
fn setup(dir: &TempDir) -> (PathBuf, PathBuf) {
    let raw = p(dir, "field.raw");
    let stream = p(dir, "field.pdr");
    ok(&["generate", "--kind", "smooth", "--dims", "20,24", "--seed", "5", "--output", s(&raw)]);
    ok(&["refactor", "--input", s(&raw), "--output", s(&stream), "--dims", "20,24", "--dtype", "f32"]);
    (raw, stream)
}

#[test]
fn refactor_summary_and_inspect() {
    let dir = TempDir::new().unwrap();
    let raw = p(&dir, "vx.raw");
    let out = p(&dir, "vx.pdr");
    ok(&["generate", "--kind", "mixed", "--dims", "16,16,16", "--output", s(&raw)]);
    let line = ok(&["refactor", "--input", s(&raw), "--output", s(&out), "--dims", "16,16,16", "--bits", "24"]);
    let fields: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(fields.len(), 6, "{line}");
    assert_eq!(fields[0], "vx");
    assert_eq!(fields[1], "16384");
    assert_eq!(fields[2].parse::<u64>().unwrap(), fs::metadata(&out).unwrap().len());
    assert_eq!(fields[3], "5");
    assert_eq!(fields[4], "24");
    assert!(fields[5].starts_with("H:") && fields[5].contains("/R:") && fields[5].contains("/D:"));

    let text = ok(&["inspect", s(&out)]);
    assert!(text.starts_with("magic HPMDR1 version 1\n"));
    assert!(text.contains("dtype f32 dims 16x16x16"));
    assert!(text.contains("B 24 m 4 levels 5"));
    assert_eq!(text.lines().filter(|l| l.starts_with("level ")).count(), 5);
}

#[test]
fn size_mismatch_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let raw = p(&dir, "a.raw");
    let out = p(&dir, "a.pdr");
    ok(&["generate", "--kind", "noise", "--dims", "10,10", "--output", s(&raw)]);
    let o = pdr(&["refactor", "--input", s(&raw), "--output", s(&out), "--dims", "10,11"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let o = pdr(&["refactor", "--input", s(&raw), "--output", s(&out), "--dims", "10,10", "--group-size", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_switch_gives_identical_streams() {
    let dir = TempDir::new().unwrap();
    let ins: Vec<PathBuf> = (0..3).map(|i| p(&dir, &format!("v{i}.raw"))).collect();
    ok(&[
        "generate", "--kind", "velocity", "--dims", "12,9,7", "--seed", "2", "--output", s(&ins[0]), "--output",
        s(&ins[1]), "--output", s(&ins[2]),
    ]);
    let mut streams = Vec::new();
    for mode in ["on", "off"] {
        let outs: Vec<PathBuf> = (0..3).map(|i| p(&dir, &format!("{mode}{i}.pdr"))).collect();
        let trace = p(&dir, &format!("{mode}.csv"));
        let mut args = vec!["refactor", "--dims", "12,9,7", "--pipeline", mode, "--trace", s(&trace)];
        for (i, o) in ins.iter().zip(&outs) {
            args.extend(["--input", s(i), "--output", s(o)]);
        }
        assert_eq!(ok(&args).lines().count(), 3);
        let csv = fs::read_to_string(&trace).unwrap();
        assert_eq!(csv.lines().next(), Some("task,chunk,class,start_ns,end_ns"));
        assert_eq!(csv.lines().count(), 13);
        streams.push(outs.iter().map(|o| fs::read(o).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(streams[0], streams[1]);
}

#[test]
fn full_precision_retrieval() {
    let dir = TempDir::new().unwrap();
    let (raw, stream) = setup(&dir);
    let out = p(&dir, "out.raw");
    let line = ok(&["retrieve", "--input", s(&stream), "--tau", "0", "--output", s(&out), "--ground-truth", s(&raw)]);
    let f: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(f.len(), 4);
    let inspect = ok(&["inspect", s(&stream)]);
    let payload: u64 = inspect
        .lines()
        .last()
        .unwrap()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(f[1].parse::<u64>().unwrap(), payload);
    let bound: f64 = f[2].parse().unwrap();
    let real: f64 = f[3].parse().unwrap();
    assert!(real <= bound);
    assert!(bound < 1e-6);

    let lib = pdr::refactor::retrieve(fs::read(&stream).unwrap(), 0.0).unwrap().0;
    let got = f32s(&out);
    assert_eq!(got.len(), lib.len());
    assert!(got.iter().zip(&lib).all(|(a, b)| *a as f64 == *b));
}

#[test]
fn tolerance_sweep_reads_more_bytes() {
    let dir = TempDir::new().unwrap();
    let (raw, stream) = setup(&dir);
    let out = p(&dir, "out.raw");
    let mut last = 0u64;
    for tau in ["1e-1", "1e-2", "1e-3", "1e-4", "1e-5", "1e-6"] {
        let line = ok(&["retrieve", "--input", s(&stream), "--tau", tau, "--output", s(&out), "--ground-truth", s(&raw)]);
        let f: Vec<&str> = line.trim().split(',').collect();
        let bytes: u64 = f[1].parse().unwrap();
        assert!(bytes >= last);
        last = bytes;
        let real: f64 = f[3].parse().unwrap();
        assert!(real <= tau.parse::<f64>().unwrap());
    }
}

#[test]
fn resumed_session_matches_single_shot() {
    let dir = TempDir::new().unwrap();
    let (_, stream) = setup(&dir);
    let state = p(&dir, "session.json");
    let a = p(&dir, "a.raw");
    let b = p(&dir, "b.raw");
    for tau in ["1e-1", "1e-3", "1e-5"] {
        ok(&["retrieve", "--input", s(&stream), "--tau", tau, "--output", s(&a), "--resume-state", s(&state)]);
    }
    let resumed = ok(&["retrieve", "--input", s(&stream), "--tau", "1e-5", "--output", s(&a), "--resume-state", s(&state)]);
    let single = ok(&["retrieve", "--input", s(&stream), "--tau", "1e-5", "--output", s(&b)]);
    assert_eq!(resumed, single);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // a session from another stream is rejected
    let other = p(&dir, "other.pdr");
    let raw2 = p(&dir, "raw2.raw");
    ok(&["generate", "--kind", "noise", "--dims", "20,24", "--output", s(&raw2)]);
    ok(&["refactor", "--input", s(&raw2), "--output", s(&other), "--dims", "20,24"]);
    let o = pdr(&["retrieve", "--input", s(&other), "--tau", "1e-3", "--output", s(&a), "--resume-state", s(&state)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_stream_exits_3() {
    let dir = TempDir::new().unwrap();
    let (_, stream) = setup(&dir);
    let out = p(&dir, "out.raw");
    let mut bytes = fs::read(&stream).unwrap();
    bytes[0] ^= 0xff;
    let bad = p(&dir, "bad.pdr");
    fs::write(&bad, &bytes).unwrap();
    assert_eq!(pdr(&["inspect", s(&bad)]).status.code(), Some(3));
    assert_eq!(pdr(&["retrieve", "--input", s(&bad), "--tau", "0", "--output", s(&out)]).status.code(), Some(3));

    let good = fs::read(&stream).unwrap();
    fs::write(&bad, &good[..good.len() - 3]).unwrap();
    assert_eq!(pdr(&["retrieve", "--input", s(&bad), "--tau", "0", "--output", s(&out)]).status.code(), Some(3));
}

#[test]
fn unreachable_tolerance_exits_4() {
    let dir = TempDir::new().unwrap();
    let raw = p(&dir, "f.raw");
    let stream = p(&dir, "f.pdr");
    let out = p(&dir, "out.raw");
    ok(&["generate", "--kind", "smooth", "--dims", "30", "--output", s(&raw)]);
    ok(&["refactor", "--input", s(&raw), "--output", s(&stream), "--dims", "30", "--bits", "6"]);
    let o = pdr(&["retrieve", "--input", s(&stream), "--tau", "1e-9", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("achieved bound"));
    assert!(out.exists());
}

#[test]
fn qoi_retrieve_line() {
    let dir = TempDir::new().unwrap();
    let raws: Vec<PathBuf> = (0..3).map(|i| p(&dir, &format!("v{i}.raw"))).collect();
    let streams: Vec<PathBuf> = (0..3).map(|i| p(&dir, &format!("v{i}.pdr"))).collect();
    ok(&[
        "generate", "--kind", "velocity", "--dims", "24,24", "--seed", "9", "--output", s(&raws[0]), "--output",
        s(&raws[1]), "--output", s(&raws[2]),
    ]);
    for (r, st) in raws.iter().zip(&streams) {
        ok(&["refactor", "--input", s(r), "--output", s(st), "--dims", "24,24"]);
    }
    for strategy in ["cp", "ma", "mape"] {
        let mut args = vec!["qoi-retrieve", "--qoi", "vtotal", "--tau", "1e-3", "--strategy", strategy];
        for (r, st) in raws.iter().zip(&streams) {
            args.extend(["--input", s(st), "--ground-truth", s(r)]);
        }
        let line = ok(&args);
        let f: Vec<&str> = line.trim().split(',').collect();
        assert_eq!(f.len(), 7, "{line}");
        assert_eq!(f[1], strategy);
        let est: f64 = f[5].parse().unwrap();
        let real: f64 = f[6].parse().unwrap();
        assert!(real <= est && est <= 1e-3);
    }
    let o = pdr(&["qoi-retrieve", "--input", s(&streams[0]), "--tau", "1e-3", "--strategy", "zz"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_tables() {
    assert_eq!(ok(&["bench", "--dims", "8,8"]), "tau,strategy,iterations,bytes,bitrate,est_err,real_err,seconds\n");
    let args = ["bench", "--dims", "24,24", "--seed", "3", "--taus", "1e-1,1e-3", "--decomposer", "identity"];
    let strip = |t: String| -> Vec<String> {
        t.lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let a = strip(ok(&args));
    assert_eq!(a, strip(ok(&args)));
    assert_eq!(a.len(), 6);
    for rows in a.chunks(3) {
        let rate = |i: usize| rows[i].split(',').nth(4).unwrap().parse::<f64>().unwrap();
        assert!(rate(1) <= rate(0), "MA above CP: {rows:?}");
    }
}
