//! Lie splitting time loop: structure sub-step, cut-off and artificial
//! displacement, fluid sub-step, ledger, stopping time and interpolants.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{ledger_step, LedgerRow, StepData};
use crate::error::{Error, Result};
use crate::fluid::{DivQuadrature, FluidBudget, FluidParams, FluidSolver, FluidState, FluidStepInputs, SlipProjection, Terms};
use crate::geometry::{ale_velocity, AleMap, GeometryBounds, HarmonicExtender};
use crate::interface::InterfaceBasis;
use crate::mesh::ReferenceMesh;
use crate::noise::{apply_g, NoiseCoefficient, NoiseConfig, WienerProcess};
use crate::quadrature::interval_average;
use crate::structure::{assemble_elastic, ElasticOperator, ElasticParams, HermiteSpace, StructureSolver, StructureState};

/// Inlet and outlet pressure (force per unit area).
/// `P_in(t) = inlet + pulse_amplitude·sin²(πt/pulse_duration)` for
/// `t < pulse_duration`, then `inlet`; `P_out(t) = outlet`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PressureConfig {
    pub inlet: f64,
    pub outlet: f64,
    pub pulse_amplitude: f64,
    /// Seconds; zero disables the pulse.
    pub pulse_duration: f64,
}

impl PressureConfig {
    pub fn inlet_at(&self, t: f64) -> f64 {
        let mut p = self.inlet;
        if self.pulse_duration > 0.0 && t < self.pulse_duration {
            p += self.pulse_amplitude * (std::f64::consts::PI * t / self.pulse_duration).sin().powi(2);
        }
        p
    }

    pub fn outlet_at(&self, _t: f64) -> f64 {
        self.outlet
    }

    /// Step averages `(P_in, P_out)` over `[t0, t1]`.
    pub fn average(&self, t0: f64, t1: f64) -> (f64, f64) {
        (
            interval_average(|t| self.inlet_at(t), t0, t1),
            interval_average(|t| self.outlet_at(t), t0, t1),
        )
    }
}

/// Initial data on the reference domain:
/// `η_0 = (0, displacement·sin²(πz/L))`, `v_0 = (0, velocity·sin²(πz/L))`,
/// `u_0 = (axial_velocity·(1 - r²), 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub displacement: f64,
    pub velocity: f64,
    pub axial_velocity: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            displacement: 0.02,
            velocity: 0.0,
            axial_velocity: 0.0,
        }
    }
}

fn default_length() -> f64 {
    1.0
}
fn default_cells() -> usize {
    8
}
fn default_s_exp() -> f64 {
    1.75
}
fn default_one() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_picard() -> usize {
    50
}
fn default_halvings() -> u32 {
    2
}

/// Parameters of one path. `final_time`, `steps`, `eps`, `delta1` and
/// `delta2` are required in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    /// `T` (seconds).
    pub final_time: f64,
    /// `N`; `Δt = T/N`.
    pub steps: usize,
    /// Penalty and structure regularization parameter `ε`.
    pub eps: f64,
    /// Lower Jacobian threshold `δ₁`.
    pub delta1: f64,
    /// The displacement norm must stay below `1/δ₂`.
    pub delta2: f64,
    /// Sobolev exponent of the cut-off norm, in `(3/2, 2)`.
    #[serde(default = "default_s_exp")]
    pub s_exp: f64,
    /// Slip coefficient `α`.
    #[serde(default = "default_one")]
    pub alpha: f64,
    /// Kinematic viscosity `ν`.
    #[serde(default = "default_one")]
    pub nu: f64,
    /// Tube length `L`.
    #[serde(default = "default_length")]
    pub length: f64,
    /// Axial cells (also the number of beam elements).
    #[serde(default = "default_cells")]
    pub nz: usize,
    /// Radial cells.
    #[serde(default = "default_cells")]
    pub nr: usize,
    /// Bending stiffness `c_b` in `𝓛_e η = c_b ∂⁴η + c_0 η`.
    #[serde(default = "default_one")]
    pub bending: f64,
    #[serde(default)]
    pub zeroth_order: f64,
    #[serde(default)]
    pub slip_projection: SlipProjection,
    /// `reduced` (one point per cell) or `full` (2x2 Gauss).
    #[serde(default)]
    pub div_quadrature: DivQuadrature,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max_picard")]
    pub max_picard: usize,
    /// Maximum number of fluid step subdivisions after a Picard failure.
    #[serde(default = "default_halvings")]
    pub max_halvings: u32,
    #[serde(default)]
    pub pressure: PressureConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(skip)]
    pub terms: Terms,
}

impl SchemeConfig {
    /// A small deterministic configuration with required fields filled.
    pub fn new(final_time: f64, steps: usize, eps: f64) -> Self {
        Self {
            final_time,
            steps,
            eps,
            delta1: 0.1,
            delta2: 0.1,
            s_exp: default_s_exp(),
            alpha: 1.0,
            nu: 1.0,
            length: 1.0,
            nz: 8,
            nr: 8,
            bending: 1.0,
            zeroth_order: 0.0,
            slip_projection: SlipProjection::Full,
            div_quadrature: DivQuadrature::Reduced,
            picard_tol: default_tol(),
            max_picard: default_max_picard(),
            max_halvings: default_halvings(),
            pressure: PressureConfig::default(),
            initial: InitialConfig::default(),
            noise: NoiseConfig::default(),
            terms: Terms::default(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.final_time / self.steps as f64
    }

    pub fn mesh(&self) -> Result<ReferenceMesh> {
        ReferenceMesh::new(self.length, self.nz, self.nr).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fluid_params(&self, dt: f64) -> FluidParams {
        FluidParams {
            dt,
            eps: self.eps,
            alpha: self.alpha,
            nu: self.nu,
            slip: self.slip_projection,
            picard_tol: self.picard_tol,
            max_picard: self.max_picard,
            div_quadrature: self.div_quadrature,
            terms: self.terms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.final_time > 0.0 && self.final_time.is_finite()) {
            return bad(format!("final_time must be positive, got {}", self.final_time));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.delta1 > 0.0 && self.delta1 < 1.0) {
            return bad(format!("delta1 must lie in (0, 1), got {}", self.delta1));
        }
        if !(self.delta2 > 0.0) {
            return bad(format!("delta2 must be positive, got {}", self.delta2));
        }
        if !(self.s_exp > 1.5 && self.s_exp < 2.0) {
            return bad(format!("s_exp must lie in (1.5, 2), got {}", self.s_exp));
        }
        if self.nz < 2 {
            return bad(format!("nz must be at least 2, got {}", self.nz));
        }
        if !(self.bending > 0.0) {
            return bad(format!("bending must be positive, got {}", self.bending));
        }
        if !(self.zeroth_order >= 0.0) {
            return bad(format!("zeroth_order must be nonnegative, got {}", self.zeroth_order));
        }
        self.mesh()?;
        self.fluid_params(self.dt()).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.noise.validate()
    }
}

/// `Θ_δ` evaluated on one set of bounds (strict inequalities).
pub fn bounds_admissible(b: &GeometryBounds, delta1: f64, delta2: f64) -> bool {
    b.injective && b.j_min > delta1 && b.eta_norm < 1.0 / delta2
}

/// `θ_δ` after the given history: one iff every entry is admissible.
pub fn compute_cutoff(history: &[GeometryBounds], delta1: f64, delta2: f64) -> bool {
    assert!(!history.is_empty(), "cut-off needs at least one step");
    history.iter().all(|b| bounds_admissible(b, delta1, delta2))
}

/// Full state of a path at one time level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub mesh: ReferenceMesh,
    pub seed: u64,
    pub dt: f64,
    /// Requested number of steps `N`.
    pub steps: usize,
    /// `u^n`, nodal, `n = 0..=done`.
    pub u: Vec<Vec<[f64; 2]>>,
    /// `v^n`, Hermite coefficients.
    pub v: Vec<Vec<f64>>,
    /// `v^{n+1/2}`, `n = 0..done`.
    pub v_half: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub eta_star: Vec<Vec<f64>>,
    pub theta: Vec<bool>,
    /// Bounds of the true displacement `η^n`.
    pub bounds: Vec<GeometryBounds>,
    /// `Δ_nW`, one entry per step.
    pub increments: Vec<Vec<f64>>,
    pub ledger: Vec<LedgerRow>,
    /// First step with `θ = 0`, or `N`.
    pub stopping_step: usize,
    /// Set when a fluid step failed after all subdivisions.
    pub failure: Option<String>,
}

impl TrajectoryRecord {
    pub fn completed_steps(&self) -> usize {
        self.ledger.len()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.ledger.len() == self.steps
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// `η^n_*`: the displacement at the last step `k ≤ n` with `θ_δ = 1`.
pub fn update_artificial(rec: &TrajectoryRecord, n: usize) -> &[f64] {
    let k = (0..=n).rev().find(|&k| rec.theta[k]).unwrap_or(0);
    &rec.eta[k]
}

/// Everything that does not depend on the path: mesh, operators, noise
/// modes and initial data.
pub struct Scheme {
    config: SchemeConfig,
    mesh: ReferenceMesh,
    space: HermiteSpace,
    basis: InterfaceBasis,
    extender: HarmonicExtender,
    structure: StructureSolver,
    fluid: FluidSolver,
    coefficient: NoiseCoefficient,
    u0: Vec<[f64; 2]>,
    s0: StructureState,
    map0: AleMap,
    bounds0: GeometryBounds,
}

struct Attempt {
    u: Vec<[f64; 2]>,
    v: Vec<f64>,
    budget: FluidBudget,
    iterations: usize,
    residual: f64,
    halvings: u32,
}

/// Budget of two consecutive sub-steps.
fn chain(a: &FluidBudget, b: &FluidBudget) -> FluidBudget {
    FluidBudget {
        kinetic_new: b.kinetic_new,
        kinetic_half: a.kinetic_half,
        numerical_fluid: a.numerical_fluid + b.numerical_fluid,
        numerical_structure: a.numerical_structure + b.numerical_structure,
        viscous: a.viscous + b.viscous,
        div_penalty: a.div_penalty + b.div_penalty,
        normal_penalty: a.normal_penalty + b.normal_penalty,
        slip: a.slip + b.slip,
        div_sq: a.div_sq + b.div_sq,
        normal_jump_sq: a.normal_jump_sq + b.normal_jump_sq,
        pressure_work: a.pressure_work + b.pressure_work,
        noise_fluid: a.noise_fluid + b.noise_fluid,
        noise_structure: a.noise_structure + b.noise_structure,
    }
}

/// Frozen data of step `n` shared by all its sub-steps.
struct StepFrame<'a> {
    step: usize,
    u_n: &'a [[f64; 2]],
    eta_star_n: &'a [f64],
    process: &'a WienerProcess,
}

impl Scheme {
    pub fn new(config: SchemeConfig) -> Result<Self> {
        config.validate()?;
        let mesh = config.mesh()?;
        let op = assemble_elastic(&ElasticParams {
            length: config.length,
            elements: config.nz,
            bending: config.bending,
            zeroth_order: config.zeroth_order,
        })?;
        let space = op.space;
        let basis = InterfaceBasis::new(config.length, config.nz);
        let extender = HarmonicExtender::new(mesh)?;
        let fluid = FluidSolver::new(mesh, &op)?;
        let spectrum = WienerProcess::new(&config.noise, 0)?;
        let coefficient = NoiseCoefficient::new(&extender, &op, &spectrum, config.noise.gain)?;

        let pi_l = std::f64::consts::PI / config.length;
        let bump = |a: f64| {
            move |z: f64| {
                let s = (pi_l * z).sin();
                ([0.0, a * s * s], [0.0, a * pi_l * (2.0 * pi_l * z).sin()])
            }
        };
        let ic = config.initial;
        let s0 = StructureState {
            eta: space.interpolate(bump(ic.displacement)),
            v: space.interpolate(bump(ic.velocity)),
        };
        let u0 = FluidState::from_fn(&mesh, |_, r| [ic.axial_velocity * (1.0 - r * r), 0.0]).u;
        let map0 = extender.extend(&space.nodal_values(&s0.eta))?;
        let bounds0 = map0.bounds(&basis, config.s_exp);
        let h2 = op.curvature_norm_sq(&s0.eta).sqrt();
        if !(bounds_admissible(&bounds0, config.delta1, config.delta2) && h2 < 1.0 / config.delta2) {
            return Err(Error::Config(format!(
                "initial displacement violates the cut-off: j_min = {:.6}, H^s norm = {:.6}, H2 norm = {:.6}, injective = {}",
                bounds0.j_min, bounds0.eta_norm, h2, bounds0.injective
            )));
        }
        let mut structure = StructureSolver::new(op);
        structure.substep(&s0, config.dt(), config.eps)?;
        Ok(Self {
            config,
            mesh,
            space,
            basis,
            extender,
            structure,
            fluid,
            coefficient,
            u0,
            s0,
            map0,
            bounds0,
        })
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn mesh(&self) -> &ReferenceMesh {
        &self.mesh
    }

    pub fn operator(&self) -> &ElasticOperator {
        self.structure.operator()
    }

    pub fn space(&self) -> &HermiteSpace {
        &self.space
    }

    pub fn basis(&self) -> &InterfaceBasis {
        &self.basis
    }

    pub fn fluid_solver(&self) -> &FluidSolver {
        &self.fluid
    }

    pub fn noise_coefficient(&self) -> &NoiseCoefficient {
        &self.coefficient
    }

    pub fn initial_state(&self) -> (&[[f64; 2]], &StructureState) {
        (&self.u0, &self.s0)
    }

    /// ALE map of a Hermite displacement.
    pub fn map_of(&self, eta: &[f64]) -> Result<AleMap> {
        self.extender.extend(&self.space.nodal_values(eta))
    }

    pub fn bounds_of(&self, eta: &[f64]) -> Result<GeometryBounds> {
        Ok(self.map_of(eta)?.bounds(&self.basis, self.config.s_exp))
    }

    fn increment(&self, process: &WienerProcess, step: usize, dt: f64) -> Vec<f64> {
        if self.config.noise.enabled {
            process.increment_at(step as u64, dt)
        } else {
            vec![0.0; self.coefficient.num_modes()]
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fluid_attempt(
        &self,
        frame: &StepFrame,
        t0: f64,
        dt: f64,
        u_prev: &[[f64; 2]],
        v_half: &[f64],
        map_a: &AleMap,
        map_b: &AleMap,
        dw: &[f64],
        salt: u64,
        level: u32,
    ) -> Result<Attempt> {
        let w = ale_velocity(map_a, map_b, dt)?;
        let force = apply_g(&self.coefficient, frame.u_n, frame.eta_star_n, dw)?;
        let (p_in, p_out) = self.config.pressure.average(t0, t0 + dt);
        let inputs = FluidStepInputs {
            u_prev,
            v_half,
            map_n: map_a,
            map_np1: map_b,
            w: &w,
            force_u: &force.fluid,
            force_v: &force.structure,
            p_in,
            p_out,
            params: self.config.fluid_params(dt),
        };
        match self.fluid.solve(&inputs) {
            Ok(out) => {
                let budget = self.fluid.budget(&inputs, &out.state.u, &out.v)?;
                Ok(Attempt {
                    u: out.state.u,
                    v: out.v,
                    budget,
                    iterations: out.report.iterations,
                    residual: out.report.residual,
                    halvings: level,
                })
            }
            Err(Error::PicardFailure { .. }) if level < self.config.max_halvings => {
                let mid: Vec<[f64; 2]> = map_a
                    .boundary_displacement()
                    .iter()
                    .zip(map_b.boundary_displacement())
                    .map(|(a, b)| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])])
                    .collect();
                let map_mid = self.extender.extend(&mid)?;
                let h = 0.5 * dt;
                let (dw1, dw2) = if self.config.noise.enabled {
                    frame.process.bridge_split(frame.step as u64, salt, dt, dw)
                } else {
                    (dw.to_vec(), vec![0.0; dw.len()])
                };
                let first =
                    self.fluid_attempt(frame, t0, h, u_prev, v_half, map_a, &map_mid, &dw1, 2 * salt + 1, level + 1)?;
                let second = self.fluid_attempt(
                    frame,
                    t0 + h,
                    h,
                    &first.u,
                    &first.v,
                    &map_mid,
                    map_b,
                    &dw2,
                    2 * salt + 2,
                    level + 1,
                )?;
                Ok(Attempt {
                    budget: chain(&first.budget, &second.budget),
                    iterations: first.iterations + second.iterations,
                    residual: first.residual.max(second.residual),
                    halvings: first.halvings.max(second.halvings),
                    u: second.u,
                    v: second.v,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Runs one path. Fluid failures after all subdivisions truncate the
    /// record and set `failure`; other errors are returned.
    pub fn run_path(&self, seed: u64) -> Result<TrajectoryRecord> {
        let cfg = &self.config;
        let dt = cfg.dt();
        let process = WienerProcess::new(&cfg.noise, seed)?;
        let mut structure = self.structure.clone();
        let mut rec = TrajectoryRecord {
            mesh: self.mesh,
            seed,
            dt,
            steps: cfg.steps,
            u: vec![self.u0.clone()],
            v: vec![self.s0.v.clone()],
            v_half: Vec::new(),
            eta: vec![self.s0.eta.clone()],
            eta_star: vec![self.s0.eta.clone()],
            theta: vec![true],
            bounds: vec![self.bounds0],
            increments: Vec::new(),
            ledger: Vec::new(),
            stopping_step: cfg.steps,
            failure: None,
        };
        let mut state = self.s0.clone();
        let mut u = self.u0.clone();
        let mut star_map = self.map0.clone();
        for n in 0..cfg.steps {
            let half = structure.substep(&state, dt, cfg.eps)?;
            let true_map = self.map_of(&half.eta)?;
            let bounds = true_map.bounds(&self.basis, cfg.s_exp);
            let theta = rec.theta[n] && bounds_admissible(&bounds, cfg.delta1, cfg.delta2);
            let (star_eta, next_map) = if theta {
                (half.eta.clone(), true_map)
            } else {
                (rec.eta_star[n].clone(), star_map.clone())
            };
            let dw = self.increment(&process, n, dt);
            let frame = StepFrame {
                step: n,
                u_n: &u,
                eta_star_n: &rec.eta_star[n],
                process: &process,
            };
            let attempt =
                match self.fluid_attempt(&frame, n as f64 * dt, dt, &u, &half.v, &star_map, &next_map, &dw, 0, 0) {
                    Ok(a) => a,
                    Err(Error::PicardFailure { iterations, residual, .. }) => {
                        rec.failure = Some(format!(
                            "fluid step {n} failed after {} subdivisions: {iterations} Picard iterations, residual {residual:.3e}",
                            cfg.max_halvings
                        ));
                        break;
                    }
                    Err(e) => return Err(e),
                };
            let row = self.ledger_row(n, &u, &state, &half, &attempt.v, &rec.eta_star[n], &star_map, &dw, &attempt)?;
            if !theta && rec.stopping_step == cfg.steps {
                rec.stopping_step = n + 1;
            }
            rec.v_half.push(half.v.clone());
            rec.u.push(attempt.u.clone());
            rec.v.push(attempt.v.clone());
            rec.eta.push(half.eta.clone());
            rec.eta_star.push(star_eta);
            rec.theta.push(theta);
            rec.bounds.push(bounds);
            rec.increments.push(dw);
            rec.ledger.push(row);
            state = StructureState {
                eta: half.eta,
                v: attempt.v,
            };
            u = attempt.u;
            star_map = next_map;
        }
        Ok(rec)
    }

    #[allow(clippy::too_many_arguments)]
    fn ledger_row(
        &self,
        n: usize,
        u_n: &[[f64; 2]],
        before: &StructureState,
        half: &StructureState,
        v_next: &[f64],
        eta_star_n: &[f64],
        map_n: &AleMap,
        dw: &[f64],
        attempt: &Attempt,
    ) -> Result<LedgerRow> {
        let op = self.structure.operator();
        let force = apply_g(&self.coefficient, u_n, eta_star_n, dw)?;
        let inv_j: Vec<f64> = map_n.jacobian().iter().map(|j| 1.0 / j).collect();
        let stochastic_work = self.mesh.l2_inner(&force.fluid, u_n) + op.mass.bilinear(&force.structure, &before.v);
        let noise_young = self.mesh.weighted_l2_sq(&force.fluid, Some(&inv_j)) + 2.0 * op.l2_norm_sq(&force.structure);
        let hs = self.coefficient.hs_norm(u_n, eta_star_n);
        let noise_quadratic = dw.iter().map(|x| x * x).sum::<f64>() * hs * hs;
        Ok(ledger_step(&StepData {
            step: n,
            dt: self.config.dt(),
            eps: self.config.eps,
            op,
            before,
            half,
            v_next,
            budget: &attempt.budget,
            stochastic_work,
            noise_quadratic,
            noise_young,
            picard_iterations: attempt.iterations,
            picard_residual: attempt.residual,
            halvings: attempt.halvings,
        }))
    }

    /// Rebuilds the ledger from the stored arrays of a record. Steps whose
    /// fluid solve was subdivided cannot be replayed and yield `None`.
    pub fn replay(&self, rec: &TrajectoryRecord) -> Result<Vec<Option<LedgerRow>>> {
        self.check_record(rec)?;
        let dt = rec.dt;
        let mut out = Vec::with_capacity(rec.ledger.len());
        let mut map_a = self.map_of(&rec.eta_star[0])?;
        for n in 0..rec.ledger.len() {
            let map_b = self.map_of(&rec.eta_star[n + 1])?;
            if rec.ledger[n].halvings > 0 {
                out.push(None);
                map_a = map_b;
                continue;
            }
            let before = StructureState {
                eta: rec.eta[n].clone(),
                v: rec.v[n].clone(),
            };
            let half = StructureState {
                eta: rec.eta[n + 1].clone(),
                v: rec.v_half[n].clone(),
            };
            let dw = &rec.increments[n];
            let w = ale_velocity(&map_a, &map_b, dt)?;
            let force = apply_g(&self.coefficient, &rec.u[n], &rec.eta_star[n], dw)?;
            let (p_in, p_out) = self.config.pressure.average(n as f64 * dt, (n + 1) as f64 * dt);
            let inputs = FluidStepInputs {
                u_prev: &rec.u[n],
                v_half: &half.v,
                map_n: &map_a,
                map_np1: &map_b,
                w: &w,
                force_u: &force.fluid,
                force_v: &force.structure,
                p_in,
                p_out,
                params: self.config.fluid_params(dt),
            };
            let budget = self.fluid.budget(&inputs, &rec.u[n + 1], &rec.v[n + 1])?;
            let attempt = Attempt {
                u: Vec::new(),
                v: Vec::new(),
                budget,
                iterations: rec.ledger[n].picard_iterations,
                residual: rec.ledger[n].picard_residual,
                halvings: 0,
            };
            out.push(Some(self.ledger_row(
                n,
                &rec.u[n],
                &before,
                &half,
                &rec.v[n + 1],
                &rec.eta_star[n],
                &map_a,
                dw,
                &attempt,
            )?));
            map_a = map_b;
        }
        Ok(out)
    }

    /// Shape checks of a record against this scheme.
    pub fn check_record(&self, rec: &TrajectoryRecord) -> Result<()> {
        let bad = |m: String| Err(Error::MeshMismatch(m));
        if rec.mesh != self.mesh {
            return bad("record mesh differs from the configured mesh".into());
        }
        let done = rec.ledger.len();
        let (nn, nd, k) = (self.mesh.num_nodes(), self.space.dim(), self.coefficient.num_modes());
        let levels = [rec.u.len(), rec.v.len(), rec.eta.len(), rec.eta_star.len(), rec.theta.len(), rec.bounds.len()];
        if levels.iter().any(|&l| l != done + 1) || rec.v_half.len() != done || rec.increments.len() != done {
            return bad("record arrays have inconsistent step counts".into());
        }
        if rec.u.iter().any(|x| x.len() != nn)
            || rec.v.iter().chain(&rec.eta).chain(&rec.eta_star).chain(&rec.v_half).any(|x| x.len() != nd)
            || rec.increments.iter().any(|x| x.len() != k)
        {
            return bad("record array lengths do not match the mesh".into());
        }
        Ok(())
    }
}

/// Builds the scheme for `config` and runs one path.
pub fn run_path(config: &SchemeConfig, seed: u64) -> Result<TrajectoryRecord> {
    Scheme::new(config.clone())?.run_path(seed)
}

/// First step at which the true displacement violates `Θ_δ`, recomputed
/// from the stored `η^n`; `N` if it never does.
pub fn detect_stopping_time(rec: &TrajectoryRecord, delta1: f64, delta2: f64, s_exp: f64) -> Result<usize> {
    let mesh = rec.mesh;
    let ext = HarmonicExtender::new(mesh)?;
    let space = HermiteSpace::new(mesh.length, mesh.nz)?;
    let basis = InterfaceBasis::new(mesh.length, mesh.nz);
    for (n, eta) in rec.eta.iter().enumerate() {
        let b = ext.extend(&space.nodal_values(eta))?.bounds(&basis, s_exp);
        if !bounds_admissible(&b, delta1, delta2) {
            return Ok(n);
        }
    }
    Ok(rec.steps)
}

fn lerp2(a: &[[f64; 2]], b: &[[f64; 2]], s: f64) -> Vec<[f64; 2]> {
    a.iter()
        .zip(b)
        .map(|(x, y)| [(1.0 - s) * x[0] + s * y[0], (1.0 - s) * x[1] + s * y[1]])
        .collect()
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect()
}

/// Time interpolants of a record on `[0, t_done]`.
#[derive(Clone, Copy, Debug)]
pub struct Interpolants<'a> {
    rec: &'a TrajectoryRecord,
}

pub fn build_interpolants(rec: &TrajectoryRecord) -> Interpolants<'_> {
    Interpolants { rec }
}

impl Interpolants<'_> {
    pub fn final_time(&self) -> f64 {
        self.rec.ledger.len() as f64 * self.rec.dt
    }

    fn steps(&self) -> usize {
        self.rec.ledger.len()
    }

    /// `n` with `t ∈ [t^n, t^{n+1})`.
    fn left(&self, t: f64) -> usize {
        ((t / self.rec.dt).floor().max(0.0) as usize).min(self.steps().saturating_sub(1))
    }

    /// `n + 1` with `t ∈ (t^n, t^{n+1}]`.
    fn right(&self, t: f64) -> usize {
        ((t / self.rec.dt).ceil().max(1.0) as usize).min(self.steps())
    }

    fn frac(&self, t: f64) -> (usize, f64) {
        let n = self.left(t);
        (n, ((t - n as f64 * self.rec.dt) / self.rec.dt).clamp(0.0, 1.0))
    }

    pub fn u(&self, t: f64) -> Vec<[f64; 2]> {
        self.rec.u[self.left(t)].clone()
    }

    pub fn v(&self, t: f64) -> Vec<f64> {
        self.rec.v[self.left(t)].clone()
    }

    pub fn eta(&self, t: f64) -> Vec<f64> {
        self.rec.eta[self.left(t)].clone()
    }

    pub fn eta_star(&self, t: f64) -> Vec<f64> {
        self.rec.eta_star[self.left(t)].clone()
    }

    /// `v^#_N = v^{n+1/2}` on `[t^n, t^{n+1})`.
    pub fn v_sharp(&self, t: f64) -> Vec<f64> {
        self.rec.v_half[self.left(t)].clone()
    }

    pub fn u_plus(&self, t: f64) -> Vec<[f64; 2]> {
        self.rec.u[self.right(t)].clone()
    }

    pub fn v_plus(&self, t: f64) -> Vec<f64> {
        self.rec.v[self.right(t)].clone()
    }

    pub fn eta_plus(&self, t: f64) -> Vec<f64> {
        self.rec.eta[self.right(t)].clone()
    }

    pub fn u_tilde(&self, t: f64) -> Vec<[f64; 2]> {
        let (n, s) = self.frac(t);
        lerp2(&self.rec.u[n], &self.rec.u[n + 1], s)
    }

    pub fn v_tilde(&self, t: f64) -> Vec<f64> {
        let (n, s) = self.frac(t);
        lerp(&self.rec.v[n], &self.rec.v[n + 1], s)
    }

    pub fn eta_tilde(&self, t: f64) -> Vec<f64> {
        let (n, s) = self.frac(t);
        lerp(&self.rec.eta[n], &self.rec.eta[n + 1], s)
    }

    pub fn eta_star_tilde(&self, t: f64) -> Vec<f64> {
        let (n, s) = self.frac(t);
        lerp(&self.rec.eta_star[n], &self.rec.eta_star[n + 1], s)
    }

    /// `∂_t η̃_N = (η^{n+1} - η^n)/Δt`.
    pub fn eta_tilde_rate(&self, t: f64) -> Vec<f64> {
        let n = self.left(t);
        self.rec.eta[n + 1].iter().zip(&self.rec.eta[n]).map(|(a, b)| (a - b) / self.rec.dt).collect()
    }
}
