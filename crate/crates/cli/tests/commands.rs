use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stochfsi_core::io::{snapshot_name, RunSummary, SNAPSHOT_VERSION};
use stochfsi_core::SnapshotFile;

const CONFIG: &str = r#"
[run]
paths = 2
seed = 7

[scheme]
final_time = 0.03
steps = 3
eps = 0.01
delta1 = 0.1
delta2 = 0.1
nz = 4
nr = 4

[scheme.noise]
gain = 0.5

[sweep]
steps = [3]
eps = [0.01]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stochfsi"));
    c.env_remove("STOCHFSI_THREADS");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_into(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, CONFIG);
    let out = dir.join(out);
    let mut args = vec!["run", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn run_writes_snapshots_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), "out", &["--paths", "1"]);
    let snap = SnapshotFile::read(&out.join(snapshot_name(7))).unwrap();
    assert_eq!(snap.header.schema_version, SNAPSHOT_VERSION);
    assert_eq!(snap.record.ledger.len(), 3);
    assert!(!out.join(snapshot_name(8)).exists());
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.schema_version, 1);
    assert_eq!(summary.paths.len(), 1);
    assert_eq!(summary.config_hash, snap.header.config_hash);
    let csv = std::fs::read_to_string(out.join("path_000007.csv")).unwrap();
    assert!(csv.starts_with("step,energy,"));
    assert_eq!(csv.lines().count(), 4);
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn missing_required_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("delta2 = 0.1\n", ""));
    let o = run(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("delta2") && err.contains("line"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("delta1 = 0.1", "delta1 = 0.1\ndelta3 = 0.2"));
    let o = run(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta3"));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_into(dir.path(), "a", &["--threads", "1"]);
    let b = run_into(dir.path(), "b", &["--threads", "2"]);
    for seed in [7, 8] {
        let x = std::fs::read(a.join(snapshot_name(seed))).unwrap();
        let y = std::fs::read(b.join(snapshot_name(seed))).unwrap();
        assert_eq!(x, y);
    }
    assert_ne!(
        std::fs::read(a.join(snapshot_name(7))).unwrap(),
        std::fs::read(a.join(snapshot_name(8))).unwrap()
    );
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = bin()
        .env("STOCHFSI_THREADS", "2")
        .args(["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .env("STOCHFSI_THREADS", "many")
        .args(["run", "--config", s(&cfg)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_healthy_corrupted_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), "out", &[]);
    let path = out.join(snapshot_name(7));
    let o = run(&["verify", s(&path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS fluid_identity"));

    let mut snap = SnapshotFile::read(&path).unwrap();
    let id = snap.record.mesh.node_id(2, 2);
    let x = &mut snap.record.u[1][id][0];
    *x = f64::from_bits(x.to_bits() ^ (1 << 62));
    let bad = dir.path().join("bad.snp");
    std::fs::write(&bad, snap.to_bytes()).unwrap();
    let o = run(&["verify", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL fluid_identity"));

    let empty = dir.path().join("empty.snp");
    std::fs::write(&empty, b"").unwrap();
    assert_eq!(code(&run(&["verify", s(&empty)])), 3);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 9;
    let wrong = dir.path().join("wrong.snp");
    std::fs::write(&wrong, &bytes).unwrap();
    assert_eq!(code(&run(&["verify", s(&wrong)])), 3);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.snp");
    std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
    assert_eq!(code(&run(&["verify", s(&cut)])), 3);
}

#[test]
fn single_point_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["boundedness.csv", "penalty.csv"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count(), 2, "{name}: {text}");
    }
    let b = std::fs::read_to_string(out.join("boundedness.csv")).unwrap();
    assert!(b.lines().nth(1).unwrap().ends_with(",ok"));
}

#[test]
fn sweep_with_grid_is_deterministic_and_flags_failures() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("steps = [3]\neps = [0.01]", "steps = [2, 4]\neps = [0.02, 0.01]");
    let cfg = write_config(dir.path(), &text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--out", s(&b), "--threads", "2"])), 0);
    let pa = std::fs::read_to_string(a.join("penalty.csv")).unwrap();
    assert_eq!(pa.lines().count(), 5);
    assert_eq!(pa, std::fs::read_to_string(b.join("penalty.csv")).unwrap());

    let failing = CONFIG
        .replace("nr = 4", "nr = 4\nnu = 0.05\nmax_picard = 1\nmax_halvings = 0")
        .replace("[scheme.noise]", "[scheme.initial]\naxial_velocity = 8.0\n\n[scheme.noise]");
    let cfg = write_config(dir.path(), &failing);
    let c = dir.path().join("c");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&c)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let b = std::fs::read_to_string(c.join("boundedness.csv")).unwrap();
    assert!(b.lines().nth(1).unwrap().ends_with(",failed_paths"), "{b}");
}

#[test]
fn sweep_without_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG.split("[sweep]").next().unwrap());
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg)])), 2);
}
