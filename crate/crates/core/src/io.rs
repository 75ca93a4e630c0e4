//! Run configuration, binary trajectory snapshots, summaries and tables.
//!
//! Snapshot layout (all integers and floats little-endian):
//!
//! ```text
//! b"SFSISNP1" | u32 schema version | u64 header length | JSON header | f64 payload
//! ```
//!
//! The payload holds, per time level `n = 0..=done`, `u^n` (nodes x 2),
//! `v^n`, `η^n`, `η^n_*`, `θ^n` and the bounds `(j_min, norm, injective)`;
//! then per step `v^{n+1/2}`, `Δ_nW` and the ledger row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{EnsembleStats, LedgerRow, PenaltyTable, LEDGER_COLUMNS};
use crate::error::{Error, Result};
use crate::geometry::GeometryBounds;
use crate::mesh::ReferenceMesh;
use crate::scheme::{Scheme, SchemeConfig, TrajectoryRecord};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SFSISNP1";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Ensemble size.
    pub paths: usize,
    /// Path `i` uses seed `seed + i`.
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            paths: 1,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// Refinement grid. `paired` walks `(steps[i], eps[i])` together;
/// otherwise every combination is run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub steps: Vec<usize>,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub paired: bool,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(usize, f64)> {
        if self.paired {
            self.steps.iter().copied().zip(self.eps.iter().copied()).collect()
        } else {
            self.steps.iter().flat_map(|&n| self.eps.iter().map(move |&e| (n, e))).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub scheme: SchemeConfig,
    pub sweep: Option<SweepGrid>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.paths == 0 {
            return Err(Error::Config("run.paths must be at least 1".into()));
        }
        self.scheme.validate()?;
        if let Some(g) = &self.sweep {
            if g.steps.is_empty() || g.eps.is_empty() {
                return Err(Error::Config("sweep grid must be nonempty".into()));
            }
            if g.paired && g.steps.len() != g.eps.len() {
                return Err(Error::Config("paired sweep needs equally long steps and eps lists".into()));
            }
            for (n, e) in g.points() {
                let mut s = self.scheme.clone();
                s.steps = n;
                s.eps = e;
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.run.paths as u64).map(|i| self.run.seed.wrapping_add(i)).collect()
    }
}

/// SHA-256 of the canonical JSON form of a scheme configuration.
pub fn config_hash(config: &SchemeConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub schema_version: u32,
    pub mesh: ReferenceMesh,
    pub config_hash: String,
    pub config: SchemeConfig,
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
    pub completed_steps: usize,
    pub structure_dim: usize,
    pub noise_modes: usize,
    pub ledger_columns: Vec<String>,
    pub stopping_step: usize,
    pub failure: Option<String>,
}

/// A trajectory together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotFile {
    pub header: SnapshotHeader,
    pub record: TrajectoryRecord,
}

impl SnapshotFile {
    pub fn new(config: &SchemeConfig, record: TrajectoryRecord) -> Self {
        let structure_dim = record.v.first().map_or(0, Vec::len);
        let noise_modes = config.noise.modes;
        Self {
            header: SnapshotHeader {
                schema_version: SNAPSHOT_VERSION,
                mesh: record.mesh,
                config_hash: config_hash(config),
                config: config.clone(),
                seed: record.seed,
                dt: record.dt,
                steps: record.steps,
                completed_steps: record.ledger.len(),
                structure_dim,
                noise_modes,
                ledger_columns: LEDGER_COLUMNS.iter().map(|s| s.to_string()).collect(),
                stopping_step: record.stopping_step,
                failure: record.failure.clone(),
            },
            record,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
        let r = &self.record;
        for n in 0..r.u.len() {
            r.u[n].iter().flatten().for_each(|&x| put(x));
            r.v[n].iter().for_each(|&x| put(x));
            r.eta[n].iter().for_each(|&x| put(x));
            r.eta_star[n].iter().for_each(|&x| put(x));
            put(f64::from(u8::from(r.theta[n])));
            let b = r.bounds[n];
            put(b.j_min);
            put(b.eta_norm);
            put(f64::from(u8::from(b.injective)));
        }
        for n in 0..r.ledger.len() {
            r.v_half[n].iter().for_each(|&x| put(x));
            r.increments[n].iter().for_each(|&x| put(x));
            r.ledger[n].to_array().into_iter().for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Snapshot(m.to_string());
        if bytes.len() < 20 {
            return Err(bad("file too short for a snapshot header"));
        }
        if &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "schema version {version}, expected {SNAPSHOT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: SnapshotHeader =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| Error::Snapshot(format!("header: {e}")))?;
        if header.schema_version != SNAPSHOT_VERSION {
            return Err(bad("header schema version mismatch"));
        }
        if header.ledger_columns != LEDGER_COLUMNS {
            return Err(bad("ledger column layout differs"));
        }
        if header.config_hash != config_hash(&header.config) {
            return Err(bad("config hash does not match the stored config"));
        }
        let m = header.mesh;
        let (nn, nd, k, done) = (m.num_nodes(), header.structure_dim, header.noise_modes, header.completed_steps);
        let per_level = 2 * nn + 3 * nd + 4;
        let per_step = nd + k + LEDGER_COLUMNS.len();
        let payload = &bytes[hend..];
        let expected = (done + 1)
            .checked_mul(per_level)
            .and_then(|a| done.checked_mul(per_step).and_then(|b| a.checked_add(b)))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad("array sizes overflow"))?;
        if payload.len() != expected {
            return Err(Error::Snapshot(format!(
                "payload has {} bytes, mesh descriptor implies {expected}",
                payload.len()
            )));
        }
        let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let mut rec = TrajectoryRecord {
            mesh: m,
            seed: header.seed,
            dt: header.dt,
            steps: header.steps,
            u: Vec::new(),
            v: Vec::new(),
            v_half: Vec::new(),
            eta: Vec::new(),
            eta_star: Vec::new(),
            theta: Vec::new(),
            bounds: Vec::new(),
            increments: Vec::new(),
            ledger: Vec::new(),
            stopping_step: header.stopping_step,
            failure: header.failure.clone(),
        };
        for _ in 0..=done {
            rec.u.push(take(2 * nn).chunks_exact(2).map(|c| [c[0], c[1]]).collect());
            rec.v.push(take(nd));
            rec.eta.push(take(nd));
            rec.eta_star.push(take(nd));
            let t = take(4);
            rec.theta.push(t[0] != 0.0);
            rec.bounds.push(GeometryBounds {
                j_min: t[1],
                eta_norm: t[2],
                injective: t[3] != 0.0,
            });
        }
        for _ in 0..done {
            rec.v_half.push(take(nd));
            rec.increments.push(take(k));
            let row = take(LEDGER_COLUMNS.len());
            rec.ledger.push(LedgerRow::from_array(&row).ok_or_else(|| bad("ledger row"))?);
        }
        Ok(Self { header, record: rec })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn snapshot_name(seed: u64) -> String {
    format!("path_{seed:06}.snp")
}

/// Per-path line of the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub seed: u64,
    pub file: String,
    pub completed_steps: usize,
    pub stopping_step: usize,
    pub failure: Option<String>,
    pub max_energy: f64,
    pub max_structure_residual: f64,
    pub max_fluid_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub dt: f64,
    pub steps: usize,
    pub eps: f64,
    pub paths: Vec<PathSummary>,
    pub stats: Option<EnsembleStats>,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Runs every seed on the current rayon pool. Results keep seed order.
pub fn run_ensemble(scheme: &Scheme, seeds: &[u64]) -> Vec<Result<TrajectoryRecord>> {
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| scheme.run_path(s)).collect()
}

/// Result of replaying the diagnostics on a stored snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn verify_snapshot(snap: &SnapshotFile) -> Result<Vec<Check>> {
    use crate::diagnostics::{verify_ledger, verify_structure_identity};
    let cfg = &snap.header.config;
    let rec = &snap.record;
    let scheme = Scheme::new(cfg.clone())?;
    scheme.check_record(rec)?;
    let replayed = scheme.replay(rec)?;
    let rows: Vec<LedgerRow> = replayed.iter().flatten().copied().collect();
    let report = verify_ledger(&rows, cfg.picard_tol);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.into(),
            passed,
            detail,
        })
    };
    push(
        "structure_identity",
        report.structure_failures.is_empty(),
        format!("max residual {:.3e}, failing steps {:?}", report.max_structure_residual, report.structure_failures),
    );
    push(
        "fluid_identity",
        report.fluid_failures.is_empty(),
        format!(
            "max residual {:.3e}, failing steps {:?}, {} subdivided steps skipped",
            report.max_fluid_residual,
            report.fluid_failures,
            replayed.len() - rows.len()
        ),
    );
    push("fluid_estimate", report.estimate_failures.is_empty(), format!("failing steps {:?}", report.estimate_failures));
    push(
        "nonnegative_dissipation",
        report.negative_dissipation.is_empty(),
        format!("failing steps {:?}", report.negative_dissipation),
    );
    let stored_struct = rec.ledger.iter().map(verify_structure_identity).fold(0.0, f64::max);
    let drift = replayed
        .iter()
        .zip(&rec.ledger)
        .filter_map(|(a, b)| a.map(|a| (a.energy - b.energy).abs() / b.energy.abs().max(1.0)))
        .fold(0.0, f64::max);
    push(
        "stored_ledger",
        drift <= 1e-9,
        format!("max relative energy drift {drift:.3e}, stored structure residual {stored_struct:.3e}"),
    );
    let mut latch = true;
    let mut frozen = true;
    for n in 1..rec.theta.len() {
        if rec.theta[n] && !rec.theta[n - 1] {
            latch = false;
        }
        let expect = if rec.theta[n] { &rec.eta[n] } else { &rec.eta_star[n - 1] };
        if &rec.eta_star[n] != expect {
            frozen = false;
        }
    }
    push("cutoff_latch", latch && frozen, format!("monotone {latch}, artificial displacement consistent {frozen}"));
    let stop = crate::scheme::detect_stopping_time(rec, cfg.delta1, cfg.delta2, cfg.s_exp)?;
    let consistent = stop == rec.stopping_step || rec.failure.is_some() && stop >= rec.ledger.len();
    push(
        "stopping_time",
        consistent && stop >= 1,
        format!("detected {stop}, recorded {}", rec.stopping_step),
    );
    Ok(checks)
}

/// CSV text with a header row.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let int_cols = ["step", "picard_iterations", "halvings"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            r.to_array()
                .iter()
                .zip(LEDGER_COLUMNS)
                .map(|(x, c)| if int_cols.contains(c) { format!("{}", *x as u64) } else { format!("{x:e}") })
                .collect()
        })
        .collect();
    csv_table(LEDGER_COLUMNS, &body)
}

/// One point of a refinement sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub eps: f64,
    pub failed_paths: usize,
    pub stats: Option<EnsembleStats>,
}

pub fn boundedness_csv(points: &[SweepPoint]) -> String {
    let header = [
        "steps",
        "eps",
        "paths",
        "failed",
        "max_energy_mean",
        "max_energy_hw",
        "dissipation_mean",
        "dissipation_hw",
        "numerical_mean",
        "numerical_hw",
        "ratio_to_previous",
        "flag",
    ];
    let mut prev: Option<f64> = None;
    let rows = points
        .iter()
        .map(|p| {
            let mut r = vec![p.steps.to_string(), format!("{:e}", p.eps)];
            match &p.stats {
                Some(s) => {
                    let ratio = prev.map_or(String::new(), |q| format!("{:.6}", s.max_energy.mean / q));
                    prev = Some(s.max_energy.mean);
                    r.extend([
                        s.num_paths.to_string(),
                        p.failed_paths.to_string(),
                        format!("{:e}", s.max_energy.mean),
                        format!("{:e}", s.max_energy.half_width),
                        format!("{:e}", s.dissipation.mean),
                        format!("{:e}", s.dissipation.half_width),
                        format!("{:e}", s.numerical.mean),
                        format!("{:e}", s.numerical.half_width),
                        ratio,
                    ]);
                }
                None => {
                    r.push("0".into());
                    r.push(p.failed_paths.to_string());
                    r.extend(std::iter::repeat_n(String::new(), 7));
                }
            }
            r.push(if p.failed_paths > 0 { "failed_paths".into() } else { "ok".into() });
            r
        })
        .collect::<Vec<_>>();
    csv_table(&header, &rows)
}

pub fn penalty_csv(table: &PenaltyTable) -> String {
    let header = [
        "eps",
        "steps",
        "div_penalty_mean",
        "div_penalty_hw",
        "normal_penalty_mean",
        "normal_penalty_hw",
        "within_bound",
    ];
    let first = table.rows.first().copied();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let ok = first.is_some_and(|f| {
                r.div_penalty.mean <= 2.0 * f.div_penalty.mean && r.normal_penalty.mean <= 2.0 * f.normal_penalty.mean
            });
            vec![
                format!("{:e}", r.eps),
                r.steps.to_string(),
                format!("{:e}", r.div_penalty.mean),
                format!("{:e}", r.div_penalty.half_width),
                format!("{:e}", r.normal_penalty.mean),
                format!("{:e}", r.normal_penalty.half_width),
                ok.to_string(),
            ]
        })
        .collect();
    csv_table(&header, &rows)
}

/// Human-readable verification lines.
pub fn format_checks(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}
