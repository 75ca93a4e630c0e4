//! Per-step energy ledger, identity checks and ensemble statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::FluidBudget;
use crate::interface::InterfaceBasis;
use crate::mesh::ReferenceMesh;
use crate::scheme::TrajectoryRecord;
use crate::structure::{ElasticOperator, StructureState};

/// One row of the discrete energy ledger (step `n -> n + 1`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: usize,
    /// `E^n`, fluid part weighted by `J^n_*`.
    pub energy: f64,
    /// `E^{n+1/2}`.
    pub energy_half: f64,
    /// `E^{n+1}`, fluid part weighted by `J^{n+1}_*`.
    pub energy_next: f64,
    /// `εΔt‖∂_zz v^{n+1/2}‖²`.
    pub d1: f64,
    /// `½‖v^{n+1/2} - v^n‖² + ½‖η^{n+1/2} - η^n‖²_{H²_0}`.
    pub c1: f64,
    /// Viscous, penalty and slip dissipation.
    pub d2: f64,
    /// `½∫J^n_*|u^{n+1} - u^n|² + ½‖v^{n+1} - v^{n+1/2}‖²`.
    pub c2: f64,
    /// The quarter-weighted numerical dissipation of the fluid estimate.
    pub c2_quarter: f64,
    pub viscous: f64,
    pub div_penalty: f64,
    pub normal_penalty: f64,
    pub slip: f64,
    /// `∫|div^{η*} u^{n+1}|²`.
    pub div_sq: f64,
    /// `∫_Γ |(u^{n+1} - v^{n+1})·n^n_*|²`.
    pub normal_jump_sq: f64,
    pub pressure_work: f64,
    /// `(G(u^n, η^n_*)Δ_nW, (u^n, v^n))`.
    pub stochastic_work: f64,
    /// `(G(u^n, η^n_*)Δ_nW, (u^{n+1}, v^{n+1}))`.
    pub stochastic_work_new: f64,
    /// `‖Δ_nW‖²_U ‖G(u^n, η^n_*)‖²_{L₂(U₀;L²)}`.
    pub noise_quadratic: f64,
    /// `∫|f_u|²/J^n_* + 2‖f_v‖²` for the noise force `f = GΔW`.
    pub noise_young: f64,
    /// `¼‖v^{n+1/2} - v^n‖²`.
    pub structure_jump: f64,
    pub picard_iterations: usize,
    pub picard_residual: f64,
    pub halvings: u32,
}

impl LedgerRow {
    pub fn dissipation(&self) -> f64 {
        self.d1 + self.d2
    }

    pub fn numerical(&self) -> f64 {
        self.c1 + self.c2
    }
}

macro_rules! ledger_columns {
    ($($f:ident: $t:ty),* $(,)?) => {
        /// Column names of [`LedgerRow::to_array`], in order.
        pub const LEDGER_COLUMNS: &[&str] = &[$(stringify!($f)),*];

        impl LedgerRow {
            /// Flat numeric form (integers stored exactly as `f64`).
            pub fn to_array(&self) -> Vec<f64> {
                vec![$(self.$f as f64),*]
            }

            pub fn from_array(a: &[f64]) -> Option<Self> {
                if a.len() != LEDGER_COLUMNS.len() {
                    return None;
                }
                let mut it = a.iter().copied();
                Some(Self { $($f: it.next()? as $t),* })
            }
        }
    };
}

ledger_columns!(
    step: usize,
    energy: f64,
    energy_half: f64,
    energy_next: f64,
    d1: f64,
    c1: f64,
    d2: f64,
    c2: f64,
    c2_quarter: f64,
    viscous: f64,
    div_penalty: f64,
    normal_penalty: f64,
    slip: f64,
    div_sq: f64,
    normal_jump_sq: f64,
    pressure_work: f64,
    stochastic_work: f64,
    stochastic_work_new: f64,
    noise_quadratic: f64,
    noise_young: f64,
    structure_jump: f64,
    picard_iterations: usize,
    picard_residual: f64,
    halvings: u32,
);

/// Everything needed to fill a ledger row for one scheme step.
pub struct StepData<'a> {
    pub step: usize,
    pub dt: f64,
    pub eps: f64,
    pub op: &'a ElasticOperator,
    pub before: &'a StructureState,
    pub half: &'a StructureState,
    pub v_next: &'a [f64],
    /// Summed over sub-steps when the fluid solve was subdivided.
    pub budget: &'a FluidBudget,
    pub stochastic_work: f64,
    pub noise_quadratic: f64,
    pub noise_young: f64,
    pub picard_iterations: usize,
    pub picard_residual: f64,
    pub halvings: u32,
}

pub fn ledger_step(d: &StepData) -> LedgerRow {
    let op = d.op;
    let elastic_n = 0.5 * op.energy_norm_sq(&d.before.eta);
    let elastic_half = 0.5 * op.energy_norm_sq(&d.half.eta);
    let vh = 0.5 * op.l2_norm_sq(&d.half.v);
    let fluid_n = d.budget.kinetic_half - vh;
    let dv: Vec<f64> = d.half.v.iter().zip(&d.before.v).map(|(a, b)| a - b).collect();
    let de: Vec<f64> = d.half.eta.iter().zip(&d.before.eta).map(|(a, b)| a - b).collect();
    let b = d.budget;
    LedgerRow {
        step: d.step,
        energy: fluid_n + 0.5 * op.l2_norm_sq(&d.before.v) + elastic_n,
        energy_half: b.kinetic_half + elastic_half,
        energy_next: b.kinetic_new + elastic_half,
        d1: d.eps * d.dt * op.curvature_norm_sq(&d.half.v),
        c1: 0.5 * op.l2_norm_sq(&dv) + 0.5 * op.energy_norm_sq(&de),
        d2: b.dissipation(),
        c2: b.numerical(),
        c2_quarter: 0.5 * b.numerical(),
        viscous: b.viscous,
        div_penalty: b.div_penalty,
        normal_penalty: b.normal_penalty,
        slip: b.slip,
        div_sq: b.div_sq,
        normal_jump_sq: b.normal_jump_sq,
        pressure_work: b.pressure_work,
        stochastic_work: d.stochastic_work,
        stochastic_work_new: b.stochastic_work(),
        noise_quadratic: d.noise_quadratic,
        noise_young: d.noise_young,
        structure_jump: 0.25 * op.l2_norm_sq(&dv),
        picard_iterations: d.picard_iterations,
        picard_residual: d.picard_residual,
        halvings: d.halvings,
    }
}

/// `|E^{n+1/2} + D^n_1 + C^n_1 - E^n|`.
pub fn verify_structure_identity(row: &LedgerRow) -> f64 {
    (row.energy_half + row.d1 + row.c1 - row.energy).abs()
}

pub fn structure_identity_holds(row: &LedgerRow) -> bool {
    verify_structure_identity(row) <= 1e-10 * row.energy.max(1.0)
}

/// `|E^{n+1} - E^{n+1/2} + C^n_2 + D^n_2 - P^n - (GΔW, U^{n+1})|`.
pub fn verify_fluid_budget(row: &LedgerRow) -> f64 {
    (row.energy_next - row.energy_half + row.c2 + row.d2 - row.pressure_work - row.stochastic_work_new).abs()
}

pub fn fluid_identity_holds(row: &LedgerRow, picard_tol: f64) -> bool {
    verify_fluid_budget(row) <= 10.0 * picard_tol * row.energy.max(1.0)
}

/// Right side minus left side of the fluid energy estimate
/// `E^{n+1} + D_2 + C_2/2 ≤ E^{n+1/2} + P^n + |(GΔW, U^n)| + ∫|f_u|²/J + 2‖f_v‖² + ¼‖v^{n+1/2} - v^n‖²`.
/// Defined for steps solved without subdivision.
pub fn fluid_estimate_slack(row: &LedgerRow) -> Option<f64> {
    if row.halvings > 0 {
        return None;
    }
    let lhs = row.energy_next + row.d2 + row.c2_quarter;
    let rhs = row.energy_half
        + row.pressure_work
        + row.stochastic_work.abs()
        + row.noise_young
        + row.structure_jump;
    Some(rhs - lhs)
}

/// Outcome of checking every row of a trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub steps: usize,
    pub max_structure_residual: f64,
    pub max_fluid_residual: f64,
    pub structure_failures: Vec<usize>,
    pub fluid_failures: Vec<usize>,
    pub estimate_failures: Vec<usize>,
    pub negative_dissipation: Vec<usize>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.structure_failures.is_empty()
            && self.fluid_failures.is_empty()
            && self.estimate_failures.is_empty()
            && self.negative_dissipation.is_empty()
    }
}

pub fn verify_ledger(rows: &[LedgerRow], picard_tol: f64) -> VerificationReport {
    let mut r = VerificationReport {
        steps: rows.len(),
        ..Default::default()
    };
    for row in rows {
        let s = verify_structure_identity(row);
        let f = verify_fluid_budget(row);
        r.max_structure_residual = r.max_structure_residual.max(s);
        r.max_fluid_residual = r.max_fluid_residual.max(f);
        if !structure_identity_holds(row) {
            r.structure_failures.push(row.step);
        }
        if !fluid_identity_holds(row, picard_tol) {
            r.fluid_failures.push(row.step);
        }
        if fluid_estimate_slack(row).is_some_and(|s| s < -10.0 * picard_tol * row.energy.max(1.0)) {
            r.estimate_failures.push(row.step);
        }
        let tol = -1e-12;
        if [row.d1, row.c1, row.d2, row.c2].iter().any(|&x| x < tol) || row.energy < 0.0 {
            r.negative_dissipation.push(row.step);
        }
    }
    r
}

/// Mean and 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Infinite below two samples; written as `null` in JSON.
    #[serde(deserialize_with = "null_as_infinity")]
    pub half_width: f64,
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        if x.len() < 2 {
            return Self {
                mean,
                half_width: f64::INFINITY,
            };
        }
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            half_width: 1.96 * (var / n).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub num_paths: usize,
    pub failed_paths: usize,
    /// `E[max_n E^n]`.
    pub max_energy: Estimate,
    /// `E[Σ_n D^n]`.
    pub dissipation: Estimate,
    /// `E[Σ_n C^n_1 + C^n_2]`.
    pub numerical: Estimate,
    /// `E Σ_n (Δt/ε)∫|div^{η*} u^{n+1}|²`.
    pub div_penalty: Estimate,
    /// `E Σ_n (Δt/ε)∫_Γ|(u^{n+1} - v^{n+1})·n|²`.
    pub normal_penalty: Estimate,
    /// `E Σ_n Δt ∫|div^{η*} u^{n+1}|²` (unscaled).
    pub div_raw: Estimate,
    /// Stopping step -> number of paths.
    pub stopping_histogram: BTreeMap<usize, usize>,
    pub warning: Option<String>,
}

/// Energy sequence `E^0, ..., E^{last}` of a trajectory.
pub fn energy_series(rec: &TrajectoryRecord) -> Vec<f64> {
    let mut out: Vec<f64> = rec.ledger.iter().map(|r| r.energy).collect();
    if let Some(last) = rec.ledger.last() {
        out.push(last.energy_next);
    }
    out
}

pub fn ensemble_stats(paths: &[TrajectoryRecord]) -> Result<EnsembleStats> {
    let done: Vec<&TrajectoryRecord> = paths.iter().filter(|p| p.failure.is_none()).collect();
    if done.is_empty() {
        return Err(Error::InvalidInput("no completed paths to aggregate".into()));
    }
    let collect = |f: &dyn Fn(&TrajectoryRecord) -> f64| -> Estimate {
        Estimate::from_samples(&done.iter().map(|p| f(p)).collect::<Vec<_>>())
    };
    let mut hist = BTreeMap::new();
    for p in &done {
        *hist.entry(p.stopping_step).or_insert(0) += 1;
    }
    Ok(EnsembleStats {
        num_paths: done.len(),
        failed_paths: paths.len() - done.len(),
        max_energy: collect(&|p| energy_series(p).into_iter().fold(0.0, f64::max)),
        dissipation: collect(&|p| p.ledger.iter().map(LedgerRow::dissipation).sum()),
        numerical: collect(&|p| p.ledger.iter().map(LedgerRow::numerical).sum()),
        div_penalty: collect(&|p| p.ledger.iter().map(|r| r.div_penalty).sum()),
        normal_penalty: collect(&|p| p.ledger.iter().map(|r| r.normal_penalty).sum()),
        div_raw: collect(&|p| p.ledger.iter().map(|r| p.dt * r.div_sq).sum()),
        stopping_histogram: hist,
        warning: (done.len() < 2)
            .then(|| format!("only {} completed path(s); half-widths are not meaningful", done.len())),
    })
}

/// Ratios `fine / coarse` of the ensemble means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRatios {
    pub max_energy: f64,
    pub dissipation: f64,
    pub numerical: f64,
    pub div_penalty: f64,
    pub normal_penalty: f64,
}

pub fn compare_refinement(coarse: &EnsembleStats, fine: &EnsembleStats) -> RefinementRatios {
    let r = |a: &Estimate, b: &Estimate| b.mean / a.mean;
    RefinementRatios {
        max_energy: r(&coarse.max_energy, &fine.max_energy),
        dissipation: r(&coarse.dissipation, &fine.dissipation),
        numerical: r(&coarse.numerical, &fine.numerical),
        div_penalty: r(&coarse.div_penalty, &fine.div_penalty),
        normal_penalty: r(&coarse.normal_penalty, &fine.normal_penalty),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRow {
    pub eps: f64,
    pub steps: usize,
    pub div_penalty: Estimate,
    pub normal_penalty: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTable {
    pub rows: Vec<PenaltyRow>,
    pub pass: bool,
}

/// Penalty means per ε, ordered from the largest ε. Passes when every
/// row stays within twice the value of the largest-ε row.
pub fn penalty_scaling_report(groups: &[(f64, usize, EnsembleStats)]) -> PenaltyTable {
    let mut rows: Vec<PenaltyRow> = groups
        .iter()
        .map(|(eps, steps, s)| PenaltyRow {
            eps: *eps,
            steps: *steps,
            div_penalty: s.div_penalty,
            normal_penalty: s.normal_penalty,
        })
        .collect();
    rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let pass = match rows.first() {
        Some(first) => rows.iter().all(|r| {
            r.div_penalty.mean <= 2.0 * first.div_penalty.mean + 1e-300
                && r.normal_penalty.mean <= 2.0 * first.normal_penalty.mean + 1e-300
        }),
        None => false,
    };
    PenaltyTable { rows, pass }
}

/// Translated-in-time moduli `Δt Σ_n ‖u^n - u^{n-j}‖²_{L²}` and
/// `Δt Σ_n ‖v^n - v^{n-j}‖²_{H^{-β}}` for a shift `h = jΔt`.
pub fn time_shift_modulus(rec: &TrajectoryRecord, h: f64, beta: f64) -> Result<(f64, f64)> {
    let j = (h / rec.dt).round();
    if h < 0.0 || (j * rec.dt - h).abs() > 1e-9 * rec.dt.max(h) {
        return Err(Error::InvalidInput(format!("shift {h} is not a multiple of dt {}", rec.dt)));
    }
    let j = j as usize;
    if j == 0 {
        return Ok((0.0, 0.0));
    }
    let mesh: ReferenceMesh = rec.mesh;
    let space = crate::structure::HermiteSpace::new(mesh.length, mesh.nz)?;
    let basis = InterfaceBasis::new(mesh.length, mesh.nz);
    let (mut mu, mut mv) = (0.0, 0.0);
    for n in j..rec.u.len() {
        let du: Vec<[f64; 2]> =
            rec.u[n].iter().zip(&rec.u[n - j]).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
        mu += rec.dt * mesh.weighted_l2_sq(&du, None);
        let dv: Vec<f64> = rec.v[n].iter().zip(&rec.v[n - j]).map(|(a, b)| a - b).collect();
        mv += rec.dt * basis.weighted_norm_vec(&space.nodal_values(&dv), -beta).powi(2);
    }
    Ok((mu, mv))
}
