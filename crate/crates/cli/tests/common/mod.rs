#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_toprokit"));
    c.env_remove("TOPROKIT_THREADS");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_threads(threads: usize, args: &[&str]) -> Output {
    bin()
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs with `dir` as the working directory so relative paths in reports match.
pub fn run_in(dir: &Path, threads: usize, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

pub fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr holds one JSON object")
}

pub fn read_json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).expect("file exists")).expect("valid json")
}

/// Every file under `dir` keyed by relative path, skipping `timing.json`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Drops the `median_ms` column of a bench CSV.
pub fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            [&cols[..5], &cols[6..]].concat().join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn write_qkv(dir: &Path, n: usize, d: usize, seed: u64, zero_q: bool) -> [PathBuf; 3] {
    use toprokit::tprv::matrix_to_file;
    use toprokit::{Matrix2D, SeededRng};
    let mut rng = SeededRng::new(seed);
    let q = if zero_q {
        Matrix2D::zeros(n, d)
    } else {
        Matrix2D::random(&mut rng, n, d, 1.0)
    };
    let k = Matrix2D::random(&mut rng, n, d, 1.0);
    let v = Matrix2D::random(&mut rng, n, d, 1.0);
    let paths = ["q", "k", "v"].map(|name| dir.join(format!("{name}.tprv")));
    for (m, p) in [&q, &k, &v].into_iter().zip(&paths) {
        matrix_to_file(m, p).unwrap();
    }
    paths
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

/// Runs every subcommand into `dir` with the given thread count and returns
/// the deterministic part of everything it wrote.
pub fn all_subcommands(dir: &Path, threads: usize) -> BTreeMap<String, BTreeMap<PathBuf, Vec<u8>>> {
    fs::create_dir_all(dir).unwrap();
    fs::create_dir_all(dir.join("inputs")).unwrap();
    write_qkv(&dir.join("inputs"), 300, 16, 5, false);
    let r = |args: &[&str]| ok(&run_in(dir, threads, args));
    let mut out = BTreeMap::new();
    for engine in ["naive", "flash", "fae"] {
        let o = format!("entropy_{engine}");
        r(&["entropy", "--q", "inputs/q.tprv", "--k", "inputs/k.tprv", "--v", "inputs/v.tprv", "--out", &o, "--engine", engine, "--block-rows", "48", "--block-cols", "64"]);
        out.insert(o.clone(), snapshot(&dir.join(&o)));
    }
    r(&["generate", "--out", "generate", "--prune-mode", "sampled", "--rng-seed", "3"]);
    out.insert("generate".into(), snapshot(&dir.join("generate")));
    r(&["generate", "--out", "baseline", "--baseline-only", "--prompt-seed", "4"]);
    out.insert("baseline".into(), snapshot(&dir.join("baseline")));
    let cal = r(&["calibrate", "generate", "baseline"]);
    out.insert("calibrate".into(), BTreeMap::from([(PathBuf::from("stdout"), cal.into_bytes())]));
    let bounds = r(&["bounds", "--trials", "300"]);
    out.insert("bounds".into(), BTreeMap::from([(PathBuf::from("stdout"), bounds.into_bytes())]));
    let bench = r(&["bench", "--n", "1,33", "--d", "8", "--blocks", "16x16", "--reps", "1"]);
    out.insert(
        "bench".into(),
        BTreeMap::from([(PathBuf::from("stdout"), without_timing(&bench).into_bytes())]),
    );
    out
}
