//! Penalized fluid half-step on the fixed reference domain.
//!
//! Unknowns are the bilinear velocity `u` (with `u_r = 0` on Γ_in, Γ_out
//! and Γ_b) and the Hermite coefficients of the structure velocity `v`.
//! They are numbered column by column (fluid nodes of column `j`, then the
//! structure dofs of beam node `j`) so the coupled matrix is banded.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transformed_gradient, AleMap, QuadField};
use crate::linalg::{norm2, BandMatrix};
use crate::mesh::{ReferenceMesh, ShapeEval};
use crate::quadrature::{on_interval, GAUSS4};
use crate::structure::{hermite_basis, ElasticOperator, HermiteSpace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlipProjection {
    /// `(1/α) ∫_Γ S (u - v)·(q - ψ)`.
    #[default]
    Full,
    /// `(1/α) ∫_Γ S ((u - v)·τ)((q - ψ)·τ)`.
    Tangential,
}

/// Quadrature for the bulk divergence penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivQuadrature {
    /// One point per cell (cell centre).
    #[default]
    Reduced,
    /// The 2x2 Gauss rule used by every other block.
    Full,
}

/// Switches for individual operator blocks. All on in production runs;
/// tests turn blocks off to isolate budget terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub advection: bool,
    pub viscous: bool,
    pub penalty: bool,
    pub slip: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self {
            advection: true,
            viscous: true,
            penalty: true,
            slip: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidParams {
    pub dt: f64,
    pub eps: f64,
    pub alpha: f64,
    pub nu: f64,
    pub slip: SlipProjection,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub div_quadrature: DivQuadrature,
    pub terms: Terms,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            eps: 1e-2,
            alpha: 1.0,
            nu: 1.0,
            slip: SlipProjection::Full,
            picard_tol: 1e-10,
            max_picard: 50,
            div_quadrature: DivQuadrature::Reduced,
            terms: Terms::default(),
        }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dt", self.dt), ("eps", self.eps), ("alpha", self.alpha), ("nu", self.nu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.picard_tol > 0.0) || self.max_picard == 0 {
            return Err(Error::InvalidInput("Picard controls must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidState {
    pub u: Vec<[f64; 2]>,
}

impl FluidState {
    pub fn zeros(mesh: &ReferenceMesh) -> Self {
        Self {
            u: vec![[0.0; 2]; mesh.num_nodes()],
        }
    }

    /// Nodal interpolation of `f`, radial component zeroed where constrained.
    pub fn from_fn(mesh: &ReferenceMesh, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut s = Self { u: mesh.sample(f) };
        s.constrain(mesh);
        s
    }

    pub fn constrain(&mut self, mesh: &ReferenceMesh) {
        for (id, u) in self.u.iter_mut().enumerate() {
            if mesh.radial_constrained(id) {
                u[1] = 0.0;
            }
        }
    }

    pub fn satisfies_constraints(&self, mesh: &ReferenceMesh) -> bool {
        self.u
            .iter()
            .enumerate()
            .all(|(id, u)| u[0].is_finite() && u[1].is_finite() && (!mesh.radial_constrained(id) || u[1] == 0.0))
    }
}

/// Data of one fluid half-step.
#[derive(Clone, Copy, Debug)]
pub struct FluidStepInputs<'a> {
    /// `u^{n+1/2} = u^n`.
    pub u_prev: &'a [[f64; 2]],
    /// `v^{n+1/2}` (Hermite coefficients).
    pub v_half: &'a [f64],
    /// `A_{η^n_*}`.
    pub map_n: &'a AleMap,
    /// `A_{η^{n+1}_*}`.
    pub map_np1: &'a AleMap,
    /// Nodal ALE velocity `w^n_*`.
    pub w: &'a [[f64; 2]],
    /// Fluid part of `G(u^n, η^n_*) Δ_n W`, nodal.
    pub force_u: &'a [[f64; 2]],
    /// Structure part of `G(u^n, η^n_*) Δ_n W`, Hermite coefficients.
    pub force_v: &'a [f64],
    pub p_in: f64,
    pub p_out: f64,
    pub params: FluidParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FluidOutput {
    pub state: FluidState,
    pub v: Vec<f64>,
    pub report: PicardReport,
}

/// Global numbering of the coupled unknowns.
#[derive(Clone, Debug)]
pub struct DofMap {
    fluid: Vec<[Option<usize>; 2]>,
    structure: Vec<usize>,
    n: usize,
    band: usize,
}

impl DofMap {
    fn new(mesh: &ReferenceMesh, space: &HermiteSpace) -> Self {
        let mut fluid = vec![[None; 2]; mesh.num_nodes()];
        let mut structure = vec![0; space.dim()];
        let mut starts = Vec::with_capacity(mesh.nz + 2);
        let mut next = 0;
        for j in 0..=mesh.nz {
            starts.push(next);
            for i in 0..=mesh.nr {
                let id = mesh.node_id(j, i);
                fluid[id][0] = Some(next);
                next += 1;
                if !mesh.radial_constrained(id) {
                    fluid[id][1] = Some(next);
                    next += 1;
                }
            }
            if j >= 1 && j < mesh.nz {
                for c in 0..4 {
                    structure[(j - 1) * 4 + c] = next;
                    next += 1;
                }
            }
        }
        starts.push(next);
        let band = (0..mesh.nz).map(|j| starts[j + 2] - starts[j] - 1).max().unwrap_or(0);
        Self {
            fluid,
            structure,
            n: next,
            band,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn fluid_dof(&self, node: usize, comp: usize) -> Option<usize> {
        self.fluid[node][comp]
    }

    pub fn structure_dof(&self, coeff: usize) -> usize {
        self.structure[coeff]
    }

    pub fn bandwidth(&self) -> usize {
        self.band
    }

    pub fn pack(&self, u: &[[f64; 2]], v: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (node, d) in self.fluid.iter().enumerate() {
            for c in 0..2 {
                if let Some(g) = d[c] {
                    x[g] = u[node][c];
                }
            }
        }
        for (k, &g) in self.structure.iter().enumerate() {
            x[g] = v[k];
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (Vec<[f64; 2]>, Vec<f64>) {
        let u = self
            .fluid
            .iter()
            .map(|d| [d[0].map_or(0.0, |g| x[g]), d[1].map_or(0.0, |g| x[g])])
            .collect();
        let v = self.structure.iter().map(|&g| x[g]).collect();
        (u, v)
    }
}

/// Fixed discretization data for the fluid half-step.
#[derive(Clone, Debug)]
pub struct FluidSolver {
    mesh: ReferenceMesh,
    space: HermiteSpace,
    structure_mass: BandMatrix,
    dofs: DofMap,
    table: [ShapeEval; 4],
}

/// One trace function on an interface edge: global dof and its vector value.
type TraceEntry = (usize, Vector2<f64>);

impl FluidSolver {
    pub fn new(mesh: ReferenceMesh, structure: &ElasticOperator) -> Result<Self> {
        let space = structure.space;
        if space.elements != mesh.nz || (space.length - mesh.length).abs() > 1e-12 * mesh.length {
            return Err(Error::MeshMismatch(format!(
                "beam ({} elements on L={}) must match the fluid mesh ({} cells on L={})",
                space.elements, space.length, mesh.nz, mesh.length
            )));
        }
        Ok(Self {
            mesh,
            space,
            structure_mass: structure.mass.clone(),
            dofs: DofMap::new(&mesh, &space),
            table: mesh.shape_table(),
        })
    }

    pub fn mesh(&self) -> &ReferenceMesh {
        &self.mesh
    }

    pub fn space(&self) -> &HermiteSpace {
        &self.space
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn structure_mass(&self) -> &BandMatrix {
        &self.structure_mass
    }

    fn check(&self, inputs: &FluidStepInputs) -> Result<()> {
        inputs.params.validate()?;
        let nn = self.mesh.num_nodes();
        let ns = self.space.dim();
        if inputs.u_prev.len() != nn || inputs.w.len() != nn || inputs.force_u.len() != nn {
            return Err(Error::InvalidInput("fluid fields must have one value per mesh node".into()));
        }
        if inputs.v_half.len() != ns || inputs.force_v.len() != ns {
            return Err(Error::InvalidInput("structure fields must match the beam space".into()));
        }
        for map in [inputs.map_n, inputs.map_np1] {
            if map.mesh() != &self.mesh {
                return Err(Error::MeshMismatch("ALE map built on a different mesh".into()));
            }
            if let Some(point) = map.jacobian().iter().position(|&j| !(j > 0.0)) {
                return Err(Error::GeometryDegenerate {
                    point,
                    jacobian: map.jacobian()[point],
                });
            }
        }
        Ok(())
    }

    fn new_matrix(&self) -> BandMatrix {
        BandMatrix::zeros(self.dofs.n, self.dofs.band, self.dofs.band)
    }

    /// Trace functions (fluid `+`, structure `-`) on interface edge `e` at local `t`.
    fn trace_entries(&self, e: usize, t: f64) -> Vec<TraceEntry> {
        let mut out = Vec::with_capacity(12);
        let nr = self.mesh.nr;
        for (node, val) in [(self.mesh.node_id(e, nr), 1.0 - t), (self.mesh.node_id(e + 1, nr), t)] {
            for c in 0..2 {
                if let Some(g) = self.dofs.fluid[node][c] {
                    let mut v = Vector2::zeros();
                    v[c] = val;
                    out.push((g, v));
                }
            }
        }
        let (h, _, _) = hermite_basis(t, self.space.h());
        for (a, &ha) in h.iter().enumerate() {
            if let Some(s) = self.space.local_dof(e, a) {
                for c in 0..2 {
                    let g = self.dofs.structure[HermiteSpace::vector_index(s, c)];
                    let mut v = Vector2::zeros();
                    v[c] = -ha;
                    out.push((g, v));
                }
            }
        }
        out
    }

    /// `F^{-T}∇N_a` at the centre of `cell`. The deformation gradient of a
    /// bilinear map is affine on the cell, so its centre value is the
    /// mean over the Gauss points.
    fn centre_gradients(&self, map: &AleMap, cell: usize) -> [Vector2<f64>; 4] {
        let f = map.grad()[4 * cell..4 * cell + 4].iter().fold(Matrix2::zeros(), |acc, m| acc + m) * 0.25;
        let finv = f.try_inverse().unwrap_or_else(Matrix2::zeros);
        let s = self.mesh.shape_at_point(0.0, 0.0);
        std::array::from_fn(|b| finv.transpose() * Vector2::new(s.grad[b][0], s.grad[b][1]))
    }

    /// `∫|div^η u|²` with the penalty quadrature.
    fn div_sq(&self, u: &[[f64; 2]], map: &AleMap, rule: DivQuadrature) -> Result<f64> {
        match rule {
            DivQuadrature::Full => {
                let w = self.mesh.quad_weights();
                let div = transformed_gradient(&QuadField::from_nodal(&self.mesh, u), map)?.divergence();
                Ok(div.iter().zip(&w).map(|(d, w)| w * d * d).sum())
            }
            DivQuadrature::Reduced => {
                let wc = 4.0 * self.mesh.cell_jacobian();
                Ok((0..self.mesh.num_cells())
                    .map(|cell| {
                        let g = self.centre_gradients(map, cell);
                        let div: f64 = self
                            .mesh
                            .cell_nodes(cell)
                            .iter()
                            .enumerate()
                            .map(|(b, &n)| g[b][0] * u[n][0] + g[b][1] * u[n][1])
                            .sum();
                        wc * div * div
                    })
                    .sum())
            }
        }
    }

    /// Adds the bulk operator blocks with advection frozen at `u_adv`.
    fn add_bulk(&self, a: &mut BandMatrix, inputs: &FluidStepInputs, u_adv: &[[f64; 2]], which: Block) {
        let p = &inputs.params;
        let dt = p.dt;
        let cj = self.mesh.cell_jacobian();
        let jn = inputs.map_n.jacobian();
        let jn1 = inputs.map_np1.jacobian();
        let finv = inputs.map_n.inv_grad();
        for cell in 0..self.mesh.num_cells() {
            let nodes = self.mesh.cell_nodes(cell);
            let mut local = [[0.0; 8]; 8];
            for (k, s) in self.table.iter().enumerate() {
                let q = 4 * cell + k;
                let wq = s.weight * cj;
                let fi = finv[q];
                let g: [Vector2<f64>; 4] =
                    std::array::from_fn(|b| fi.transpose() * Vector2::new(s.grad[b][0], s.grad[b][1]));
                let mut beta = Vector2::zeros();
                for (b, &n) in nodes.iter().enumerate() {
                    beta += Vector2::new(u_adv[n][0] - inputs.w[n][0], u_adv[n][1] - inputs.w[n][1]) * s.value[b];
                }
                for ia in 0..4 {
                    for ib in 0..4 {
                        let mass = wq * s.value[ia] * s.value[ib];
                        let bg_b = beta.dot(&g[ib]);
                        let bg_a = beta.dot(&g[ia]);
                        let gg = g[ia].dot(&g[ib]);
                        for c in 0..2 {
                            for d in 0..2 {
                                let mut v = 0.0;
                                if which.mass && c == d {
                                    v += mass * (jn[q] + 0.5 * (jn1[q] - jn[q]));
                                }
                                if which.advection && c == d {
                                    v += 0.5 * dt * jn[q] * wq
                                        * (s.value[ia] * bg_b - s.value[ib] * bg_a);
                                }
                                if which.viscous {
                                    let dd = if c == d { gg } else { 0.0 };
                                    v += 2.0 * p.nu * dt * jn[q] * wq * 0.5 * (dd + g[ia][d] * g[ib][c]);
                                }
                                if which.penalty && p.div_quadrature == DivQuadrature::Full {
                                    v += dt / p.eps * wq * g[ib][d] * g[ia][c];
                                }
                                local[ia * 2 + c][ib * 2 + d] += v;
                            }
                        }
                    }
                }
            }
            if which.penalty && p.div_quadrature == DivQuadrature::Reduced {
                let g = self.centre_gradients(inputs.map_n, cell);
                let wc = 4.0 * cj;
                for ia in 0..4 {
                    for ib in 0..4 {
                        for c in 0..2 {
                            for d in 0..2 {
                                local[ia * 2 + c][ib * 2 + d] += dt / p.eps * wc * g[ib][d] * g[ia][c];
                            }
                        }
                    }
                }
            }
            for ia in 0..4 {
                for c in 0..2 {
                    let Some(row) = self.dofs.fluid[nodes[ia]][c] else { continue };
                    for ib in 0..4 {
                        for d in 0..2 {
                            if let Some(col) = self.dofs.fluid[nodes[ib]][d] {
                                a.add(row, col, local[ia * 2 + c][ib * 2 + d]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the interface penalty and slip blocks.
    fn add_interface(&self, a: &mut BandMatrix, inputs: &FluidStepInputs, penalty: bool, slip: bool) {
        let p = &inputs.params;
        let hz = self.mesh.hz();
        for (e, edge) in inputs.map_n.edges().iter().enumerate() {
            let n = edge.normal;
            let tau = edge.unit_tangent();
            for (t, w) in on_interval(&GAUSS4, 0.0, 1.0) {
                let wq = w * hz;
                let entries = self.trace_entries(e, t);
                for &(gi, xi) in &entries {
                    for &(gk, xk) in &entries {
                        let mut v = 0.0;
                        if penalty {
                            v += p.dt / p.eps * xk.dot(&n) * xi.dot(&n);
                        }
                        if slip {
                            let pair = match p.slip {
                                SlipProjection::Full => xk.dot(&xi),
                                SlipProjection::Tangential => xk.dot(&tau) * xi.dot(&tau),
                            };
                            v += p.dt / p.alpha * edge.surface_jacobian * pair;
                        }
                        a.add(gi, gk, wq * v);
                    }
                }
            }
        }
    }

    fn add_structure_mass(&self, a: &mut BandMatrix) {
        let m = &self.structure_mass;
        let ns = self.space.dim();
        for i in 0..ns {
            for j in i.saturating_sub(7)..(i + 8).min(ns) {
                let v = m.get(i, j);
                if v != 0.0 {
                    a.add(self.dofs.structure[i], self.dofs.structure[j], v);
                }
            }
        }
    }

    /// Right-hand side: mass terms, pressure work and the noise pairing.
    pub fn assemble_rhs(&self, inputs: &FluidStepInputs) -> Result<Vec<f64>> {
        self.check(inputs)?;
        let p = &inputs.params;
        let mut b = vec![0.0; self.dofs.n];
        let cj = self.mesh.cell_jacobian();
        let jn = inputs.map_n.jacobian();
        for cell in 0..self.mesh.num_cells() {
            let nodes = self.mesh.cell_nodes(cell);
            for (k, s) in self.table.iter().enumerate() {
                let q = 4 * cell + k;
                let wq = s.weight * cj;
                let mut up = [0.0; 2];
                let mut f = [0.0; 2];
                for (a, &n) in nodes.iter().enumerate() {
                    for c in 0..2 {
                        up[c] += s.value[a] * inputs.u_prev[n][c];
                        f[c] += s.value[a] * inputs.force_u[n][c];
                    }
                }
                for (a, &n) in nodes.iter().enumerate() {
                    for c in 0..2 {
                        if let Some(g) = self.dofs.fluid[n][c] {
                            b[g] += wq * s.value[a] * (jn[q] * up[c] + f[c]);
                        }
                    }
                }
            }
        }
        let mv = self.structure_mass.matvec(inputs.v_half);
        let mf = self.structure_mass.matvec(inputs.force_v);
        for k in 0..self.space.dim() {
            b[self.dofs.structure[k]] += mv[k] + mf[k];
        }
        let hr = self.mesh.hr();
        for i in 0..=self.mesh.nr {
            let weight = if i == 0 || i == self.mesh.nr { 0.5 * hr } else { hr };
            let inlet = self.mesh.node_id(0, i);
            let outlet = self.mesh.node_id(self.mesh.nz, i);
            b[self.dofs.fluid[inlet][0].unwrap()] += p.dt * inputs.p_in * weight;
            b[self.dofs.fluid[outlet][0].unwrap()] -= p.dt * inputs.p_out * weight;
        }
        Ok(b)
    }

    /// Picard matrix with the advecting velocity frozen at `u_adv`.
    pub fn assemble_matrix(&self, inputs: &FluidStepInputs, u_adv: &[[f64; 2]]) -> Result<BandMatrix> {
        self.check(inputs)?;
        if u_adv.len() != self.mesh.num_nodes() {
            return Err(Error::InvalidInput("advecting velocity must be nodal".into()));
        }
        let t = inputs.params.terms;
        let mut a = self.new_matrix();
        self.add_bulk(
            &mut a,
            inputs,
            u_adv,
            Block {
                mass: true,
                advection: t.advection,
                viscous: t.viscous,
                penalty: t.penalty,
            },
        );
        self.add_interface(&mut a, inputs, t.penalty, t.slip);
        self.add_structure_mass(&mut a);
        Ok(a)
    }

    /// Only the `1/ε` blocks (bulk divergence and interface normal penalty).
    pub fn assemble_penalty(&self, inputs: &FluidStepInputs) -> Result<BandMatrix> {
        self.check(inputs)?;
        let mut a = self.new_matrix();
        let zero = vec![[0.0; 2]; self.mesh.num_nodes()];
        self.add_bulk(&mut a, inputs, &zero, Block { penalty: true, ..Block::NONE });
        self.add_interface(&mut a, inputs, true, false);
        Ok(a)
    }

    /// Only the slip block.
    pub fn assemble_slip(&self, inputs: &FluidStepInputs) -> Result<BandMatrix> {
        self.check(inputs)?;
        let mut a = self.new_matrix();
        self.add_interface(&mut a, inputs, false, true);
        Ok(a)
    }

    /// Solves the nonlinear system by Picard iteration, starting from
    /// `(u^{n+1/2}, v^{n+1/2})`.
    pub fn solve(&self, inputs: &FluidStepInputs) -> Result<FluidOutput> {
        let b = self.assemble_rhs(inputs)?;
        let p = &inputs.params;
        let bnorm = norm2(&b);
        let mut x = self.dofs.pack(inputs.u_prev, inputs.v_half);
        let mut a = self.assemble_matrix(inputs, &self.dofs.unpack(&x).0)?;
        let mut residual = f64::INFINITY;
        for it in 1..=p.max_picard {
            x = a.factor()?.solve(&b);
            let (u, v) = self.dofs.unpack(&x);
            let next = self.assemble_matrix(inputs, &u)?;
            let r: Vec<f64> = next.matvec(&x).iter().zip(&b).map(|(a, b)| a - b).collect();
            residual = norm2(&r) / if bnorm > 0.0 { bnorm } else { 1.0 };
            if !residual.is_finite() {
                break;
            }
            if residual <= p.picard_tol || !p.terms.advection {
                return Ok(FluidOutput {
                    state: FluidState { u },
                    v,
                    report: PicardReport { iterations: it, residual },
                });
            }
            a = next;
        }
        let (last_u, last_v) = self.dofs.unpack(&x);
        Err(Error::PicardFailure {
            iterations: p.max_picard,
            residual,
            last_u,
            last_v,
        })
    }

    /// Fluid trace `u` and structure velocity `v` on edge `e` at local `t`.
    pub fn interface_values(&self, u: &[[f64; 2]], v: &[f64], e: usize, t: f64) -> (Vector2<f64>, Vector2<f64>) {
        let nr = self.mesh.nr;
        let a = u[self.mesh.node_id(e, nr)];
        let b = u[self.mesh.node_id(e + 1, nr)];
        let uf = Vector2::new((1.0 - t) * a[0] + t * b[0], (1.0 - t) * a[1] + t * b[1]);
        let vs = self.space.eval_on_element(v, e, t);
        (uf, Vector2::new(vs[0], vs[1]))
    }

    /// Evaluates every term of the energy identity obtained by testing the
    /// fluid half-step with its own solution.
    pub fn budget(&self, inputs: &FluidStepInputs, u1: &[[f64; 2]], v1: &[f64]) -> Result<FluidBudget> {
        self.check(inputs)?;
        let p = &inputs.params;
        let t = p.terms;
        let mesh = &self.mesh;
        let weights = mesh.quad_weights();
        let jn = inputs.map_n.jacobian();
        let jn1 = inputs.map_np1.jacobian();
        let uq1 = mesh.interpolate(u1);
        let uqh = mesh.interpolate(inputs.u_prev);
        let fq = mesh.interpolate(inputs.force_u);
        let tg = transformed_gradient(&QuadField::from_nodal(mesh, u1), inputs.map_n)?;

        let mut b = FluidBudget::default();
        for q in 0..weights.len() {
            let w = weights[q];
            let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
            let du = [uq1[q][0] - uqh[q][0], uq1[q][1] - uqh[q][1]];
            b.kinetic_new += 0.5 * w * jn1[q] * sq(uq1[q]);
            b.kinetic_half += 0.5 * w * jn[q] * sq(uqh[q]);
            b.numerical_fluid += 0.5 * w * jn[q] * sq(du);
            let d: Matrix2<f64> = tg.sym(q);
            if t.viscous {
                b.viscous += 2.0 * p.nu * p.dt * w * jn[q] * d.norm_squared();
            }
            b.noise_fluid += w * (fq[q][0] * uq1[q][0] + fq[q][1] * uq1[q][1]);
        }
        b.div_sq = self.div_sq(u1, inputs.map_n, p.div_quadrature)?;
        if t.penalty {
            b.div_penalty = p.dt / p.eps * b.div_sq;
        }

        let m = &self.structure_mass;
        let dv: Vec<f64> = v1.iter().zip(inputs.v_half).map(|(a, b)| a - b).collect();
        b.kinetic_new += 0.5 * m.bilinear(v1, v1);
        b.kinetic_half += 0.5 * m.bilinear(inputs.v_half, inputs.v_half);
        b.numerical_structure = 0.5 * m.bilinear(&dv, &dv);
        b.noise_structure = m.bilinear(inputs.force_v, v1);

        let hz = mesh.hz();
        for (e, edge) in inputs.map_n.edges().iter().enumerate() {
            let tau = edge.unit_tangent();
            for (tt, w) in on_interval(&GAUSS4, 0.0, 1.0) {
                let (uf, vs) = self.interface_values(u1, v1, e, tt);
                let jump = uf - vs;
                let jn_sq = jump.dot(&edge.normal).powi(2);
                b.normal_jump_sq += w * hz * jn_sq;
                let slip_pair = match p.slip {
                    SlipProjection::Full => jump.norm_squared(),
                    SlipProjection::Tangential => jump.dot(&tau).powi(2),
                };
                if t.slip {
                    b.slip += p.dt / p.alpha * w * hz * edge.surface_jacobian * slip_pair;
                }
            }
        }
        if t.penalty {
            b.normal_penalty = p.dt / p.eps * b.normal_jump_sq;
        }

        let hr = mesh.hr();
        for i in 0..=mesh.nr {
            let weight = if i == 0 || i == mesh.nr { 0.5 * hr } else { hr };
            b.pressure_work += p.dt * weight
                * (inputs.p_in * u1[mesh.node_id(0, i)][0] - inputs.p_out * u1[mesh.node_id(mesh.nz, i)][0]);
        }
        Ok(b)
    }
}

#[derive(Clone, Copy)]
struct Block {
    mass: bool,
    advection: bool,
    viscous: bool,
    penalty: bool,
}

impl Block {
    const NONE: Block = Block {
        mass: false,
        advection: false,
        viscous: false,
        penalty: false,
    };
}

/// Terms of the tested fluid energy identity
/// `E^{n+1} - E^{n+1/2} + C_2 + D_2 = pressure work + (GΔW, U^{n+1})`,
/// without the (unchanged) elastic energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FluidBudget {
    /// `½∫J^{n+1}|u^{n+1}|² + ½‖v^{n+1}‖²`.
    pub kinetic_new: f64,
    /// `½∫J^n|u^{n+1/2}|² + ½‖v^{n+1/2}‖²`.
    pub kinetic_half: f64,
    /// `½∫J^n|u^{n+1} - u^{n+1/2}|²`.
    pub numerical_fluid: f64,
    /// `½‖v^{n+1} - v^{n+1/2}‖²`.
    pub numerical_structure: f64,
    pub viscous: f64,
    pub div_penalty: f64,
    pub normal_penalty: f64,
    pub slip: f64,
    /// `∫|div^η u^{n+1}|²` (unscaled).
    pub div_sq: f64,
    /// `∫_Γ |(u^{n+1} - v^{n+1})·n|²` (unscaled).
    pub normal_jump_sq: f64,
    pub pressure_work: f64,
    pub noise_fluid: f64,
    pub noise_structure: f64,
}

impl FluidBudget {
    pub fn dissipation(&self) -> f64 {
        self.viscous + self.div_penalty + self.normal_penalty + self.slip
    }

    pub fn numerical(&self) -> f64 {
        self.numerical_fluid + self.numerical_structure
    }

    pub fn stochastic_work(&self) -> f64 {
        self.noise_fluid + self.noise_structure
    }

    /// Signed `LHS - RHS` of the identity.
    pub fn defect(&self) -> f64 {
        (self.kinetic_new - self.kinetic_half + self.numerical() + self.dissipation())
            - (self.pressure_work + self.stochastic_work())
    }
}

/// `½∫J((u - w)·∇^η u·q - (u - w)·∇^η q·u)` for nodal fields.
pub fn trilinear_b(u: &[[f64; 2]], w: &[[f64; 2]], q: &[[f64; 2]], map: &AleMap) -> Result<f64> {
    let mesh = map.mesh();
    let uf = QuadField::from_nodal(mesh, u);
    let qf = QuadField::from_nodal(mesh, q);
    let gu = transformed_gradient(&uf, map)?;
    let gq = transformed_gradient(&qf, map)?;
    let wq = mesh.interpolate(w);
    let weights = mesh.quad_weights();
    let mut sum = 0.0;
    for k in 0..weights.len() {
        let beta = uf.values[k] - Vector2::new(wq[k][0], wq[k][1]);
        let a = (gu.tensors[k] * beta).dot(&qf.values[k]);
        let b = (gq.tensors[k] * beta).dot(&uf.values[k]);
        sum += weights[k] * map.jacobian()[k] * (a - b);
    }
    Ok(0.5 * sum)
}

pub fn assemble_fluid_system(
    solver: &FluidSolver,
    inputs: &FluidStepInputs,
    u_adv: &[[f64; 2]],
) -> Result<(BandMatrix, Vec<f64>)> {
    Ok((solver.assemble_matrix(inputs, u_adv)?, solver.assemble_rhs(inputs)?))
}

pub fn fluid_substep(solver: &FluidSolver, inputs: &FluidStepInputs) -> Result<FluidOutput> {
    solver.solve(inputs)
}

/// `|LHS - RHS|` of the tested energy identity for a computed step.
pub fn fluid_energy_identity_residual(
    solver: &FluidSolver,
    inputs: &FluidStepInputs,
    output: &FluidOutput,
) -> Result<f64> {
    Ok(solver.budget(inputs, &output.state.u, &output.v)?.defect().abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ale_velocity, HarmonicExtender};
    use crate::structure::{assemble_elastic, ElasticParams};
    use nalgebra::DMatrix;

    struct Fixture {
        mesh: ReferenceMesh,
        solver: FluidSolver,
        maps: (AleMap, AleMap),
        w: Vec<[f64; 2]>,
        u: Vec<[f64; 2]>,
        v: Vec<f64>,
        fu: Vec<[f64; 2]>,
        fv: Vec<f64>,
    }

    fn bump(mesh: &ReferenceMesh, az: f64, ar: f64) -> Vec<[f64; 2]> {
        (0..=mesh.nz)
            .map(|j| {
                let z = j as f64 / mesh.nz as f64;
                let b = (std::f64::consts::PI * z).sin().powi(2);
                [az * b * (2.0 * z - 1.0), ar * b]
            })
            .collect()
    }

    fn fixture(n: usize, dt: f64) -> Fixture {
        let mesh = ReferenceMesh::unit(n);
        let op = assemble_elastic(&ElasticParams { elements: n, ..Default::default() }).unwrap();
        let solver = FluidSolver::new(mesh, &op).unwrap();
        let ext = HarmonicExtender::new(mesh).unwrap();
        let m0 = ext.extend(&bump(&mesh, 0.02, 0.05)).unwrap();
        let m1 = ext.extend(&bump(&mesh, 0.025, 0.06)).unwrap();
        let w = ale_velocity(&m0, &m1, dt).unwrap();
        let u = FluidState::from_fn(&mesh, |z, r| [1.0 - r * r + 0.2 * z, 0.3 * (3.0 * z).sin() * r]).u;
        let space = op.space;
        let v = space.interpolate(|x| {
            let s = (std::f64::consts::PI * x).sin();
            let c = std::f64::consts::PI * (std::f64::consts::PI * x).cos();
            ([0.1 * s * s, -0.2 * s * s], [0.2 * s * c, -0.4 * s * c])
        });
        let fu = FluidState::from_fn(&mesh, |z, r| [0.05 * r * (1.0 - z), 0.02 * z * r]).u;
        let fv: Vec<f64> = v.iter().map(|x| -0.3 * x).collect();
        Fixture {
            mesh,
            solver,
            maps: (m0, m1),
            w,
            u,
            v,
            fu,
            fv,
        }
    }

    fn inputs<'a>(f: &'a Fixture, params: FluidParams) -> FluidStepInputs<'a> {
        FluidStepInputs {
            u_prev: &f.u,
            v_half: &f.v,
            map_n: &f.maps.0,
            map_np1: &f.maps.1,
            w: &f.w,
            force_u: &f.fu,
            force_v: &f.fv,
            p_in: 2.0,
            p_out: 0.5,
            params,
        }
    }

    fn dense(m: &BandMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(m.dim(), m.dim(), |i, j| m.get(i, j))
    }

    #[test]
    fn skew_form_vanishes_on_diagonal() {
        let f = fixture(6, 0.01);
        let val = trilinear_b(&f.u, &f.w, &f.u, &f.maps.0).unwrap();
        assert!(val.abs() < 1e-12);
        let other = trilinear_b(&f.u, &f.w, &f.fu, &f.maps.0).unwrap();
        assert!(other.abs() > 1e-6);
    }

    #[test]
    fn skew_form_constant_fields_on_identity() {
        // Constant u and q have zero gradients, so the form vanishes.
        let mesh = ReferenceMesh::unit(3);
        let id = AleMap::identity(mesh);
        let c = vec![[0.4, -1.0]; mesh.num_nodes()];
        assert_eq!(trilinear_b(&c, &vec![[0.0; 2]; mesh.num_nodes()], &c, &id).unwrap(), 0.0);
        // u = (z, 0), q = (1, 0), w = 0: ½∫(u_z ∂_z u_z q_z - 0) = ½∫ z dz dr = 1/4.
        let u = mesh.sample(|z, _| [z, 0.0]);
        let q = vec![[1.0, 0.0]; mesh.num_nodes()];
        let val = trilinear_b(&u, &vec![[0.0; 2]; mesh.num_nodes()], &q, &id).unwrap();
        assert!((val - 0.25).abs() < 1e-14);
    }

    #[test]
    fn zero_inputs_give_zero_in_one_iteration() {
        let mesh = ReferenceMesh::unit(4);
        let op = assemble_elastic(&ElasticParams { elements: 4, ..Default::default() }).unwrap();
        let solver = FluidSolver::new(mesh, &op).unwrap();
        let id = AleMap::identity(mesh);
        let zu = vec![[0.0; 2]; mesh.num_nodes()];
        let zv = vec![0.0; op.dim()];
        let inp = FluidStepInputs {
            u_prev: &zu,
            v_half: &zv,
            map_n: &id,
            map_np1: &id,
            w: &zu,
            force_u: &zu,
            force_v: &zv,
            p_in: 0.0,
            p_out: 0.0,
            params: FluidParams::default(),
        };
        let out = fluid_substep(&solver, &inp).unwrap();
        assert_eq!(out.report.iterations, 1);
        assert!(out.state.u.iter().all(|v| v == &[0.0, 0.0]));
        assert!(out.v.iter().all(|&x| x == 0.0));
        assert_eq!(fluid_energy_identity_residual(&solver, &inp, &out).unwrap(), 0.0);
    }

    #[test]
    fn rhs_without_data_is_mass_times_state() {
        let f = fixture(4, 0.01);
        let id = AleMap::identity(f.mesh);
        let z = vec![[0.0; 2]; f.mesh.num_nodes()];
        let zv = vec![0.0; f.v.len()];
        let inp = FluidStepInputs {
            u_prev: &f.u,
            v_half: &f.v,
            map_n: &id,
            map_np1: &id,
            w: &z,
            force_u: &z,
            force_v: &zv,
            p_in: 0.0,
            p_out: 0.0,
            params: FluidParams::default(),
        };
        let b = f.solver.assemble_rhs(&inp).unwrap();
        let x = f.solver.dofs().pack(&f.u, &f.v);
        // The mass-only operator: everything off, structure mass kept.
        let mut p = FluidParams::default();
        p.terms = Terms { advection: false, viscous: false, penalty: false, slip: false };
        let mass = f.solver.assemble_matrix(&FluidStepInputs { params: p, ..inp }, &z).unwrap();
        let mx = mass.matvec(&x);
        for (a, b) in mx.iter().zip(&b) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn penalty_blocks_split_off() {
        let f = fixture(4, 0.01);
        let base = FluidParams::default();
        let inp = inputs(&f, base);
        let full = dense(&f.solver.assemble_matrix(&inp, &f.u).unwrap());
        let mut off = base;
        off.terms.penalty = false;
        let unpen = dense(&f.solver.assemble_matrix(&FluidStepInputs { params: off, ..inp }, &f.u).unwrap());
        let pen = dense(&f.solver.assemble_penalty(&inp).unwrap());
        assert!((&full - (&unpen + &pen)).amax() < 1e-12);
        let mut big = base;
        big.eps = 1e6;
        let pen_big = dense(&f.solver.assemble_penalty(&FluidStepInputs { params: big, ..inp }).unwrap());
        assert!((pen_big * 1e6 - &pen * base.eps).amax() < 1e-9);
    }

    #[test]
    fn penalty_and_slip_blocks_are_psd() {
        let f = fixture(3, 0.01);
        let inp = inputs(&f, FluidParams::default());
        for m in [f.solver.assemble_penalty(&inp).unwrap(), f.solver.assemble_slip(&inp).unwrap()] {
            let d = dense(&m);
            assert!((&d - d.transpose()).amax() < 1e-12);
            let scale = d.amax();
            assert!(d.symmetric_eigen().eigenvalues.min() >= -1e-12 * scale);
        }
    }

    #[test]
    fn advection_block_is_antisymmetric() {
        let f = fixture(4, 0.01);
        let mut p = FluidParams::default();
        p.terms = Terms { advection: true, viscous: false, penalty: false, slip: false };
        let inp = inputs(&f, p);
        let with = dense(&f.solver.assemble_matrix(&inp, &f.u).unwrap());
        p.terms.advection = false;
        let without = dense(&f.solver.assemble_matrix(&FluidStepInputs { params: p, ..inp }, &f.u).unwrap());
        let adv = with - without;
        assert!((&adv + adv.transpose()).amax() < 1e-14);
        assert!(adv.amax() > 1e-6);
    }

    #[test]
    fn system_commutes_with_axial_reflection() {
        let n = 4;
        let mesh = ReferenceMesh::unit(n);
        let op = assemble_elastic(&ElasticParams { elements: n, ..Default::default() }).unwrap();
        let solver = FluidSolver::new(mesh, &op).unwrap();
        let ext = HarmonicExtender::new(mesh).unwrap();
        let m0 = ext.extend(&bump(&mesh, 0.03, 0.08)).unwrap();
        let z = vec![[0.0; 2]; mesh.num_nodes()];
        let zv = vec![0.0; op.dim()];
        let u_adv = FluidState::from_fn(&mesh, |z, r| [r * (1.0 - r) * (z - 0.5), r * z * (1.0 - z)]).u;
        let inp = FluidStepInputs {
            u_prev: &z,
            v_half: &zv,
            map_n: &m0,
            map_np1: &m0,
            w: &z,
            force_u: &z,
            force_v: &zv,
            p_in: 0.0,
            p_out: 0.0,
            params: FluidParams { slip: SlipProjection::Tangential, ..Default::default() },
        };
        let a = dense(&solver.assemble_matrix(&inp, &u_adv).unwrap());
        let dofs = solver.dofs();
        let mut perm = DMatrix::<f64>::zeros(dofs.len(), dofs.len());
        for id in 0..mesh.num_nodes() {
            let (j, i) = mesh.node_ij(id);
            let mirror = mesh.node_id(n - j, i);
            for c in 0..2 {
                if let (Some(from), Some(to)) = (dofs.fluid_dof(id, c), dofs.fluid_dof(mirror, c)) {
                    perm[(to, from)] = if c == 0 { -1.0 } else { 1.0 };
                }
            }
        }
        for j in 1..n {
            for c in 0..2 {
                for k in 0..2 {
                    let from = dofs.structure_dof((j - 1) * 4 + c * 2 + k);
                    let to = dofs.structure_dof((n - j - 1) * 4 + c * 2 + k);
                    // η_z is odd and η_r even; slopes flip parity.
                    let odd = (c == 0) ^ (k == 1);
                    perm[(to, from)] = if odd { -1.0 } else { 1.0 };
                }
            }
        }
        let conj = &perm * &a * perm.transpose();
        assert!((conj - &a).amax() < 1e-12 * a.amax());
    }

    #[test]
    fn converged_step_satisfies_energy_identity() {
        let f = fixture(8, 0.01);
        let inp = inputs(&f, FluidParams { dt: 0.01, ..Default::default() });
        let out = fluid_substep(&f.solver, &inp).unwrap();
        assert!(out.report.residual <= 1e-10);
        assert!(out.state.satisfies_constraints(&f.mesh));
        let budget = f.solver.budget(&inp, &out.state.u, &out.v).unwrap();
        assert!(budget.dissipation() > 0.0);
        let res = fluid_energy_identity_residual(&f.solver, &inp, &out).unwrap();
        let scale = budget.kinetic_half.max(1.0);
        assert!(res <= 10.0 * 1e-10 * scale, "residual {res}");
    }

    #[test]
    fn tangential_variant_also_balances() {
        let f = fixture(6, 0.01);
        let inp = inputs(&f, FluidParams { slip: SlipProjection::Tangential, ..Default::default() });
        let out = fluid_substep(&f.solver, &inp).unwrap();
        assert!(fluid_energy_identity_residual(&f.solver, &inp, &out).unwrap() < 1e-9);
    }

    #[test]
    fn mass_only_step_is_exact_quadratic_identity() {
        let f = fixture(5, 0.01);
        let mut p = FluidParams::default();
        p.terms = Terms { advection: false, viscous: false, penalty: false, slip: false };
        let inp = FluidStepInputs { p_in: 0.0, p_out: 0.0, ..inputs(&f, p) };
        let out = fluid_substep(&f.solver, &inp).unwrap();
        let b = f.solver.budget(&inp, &out.state.u, &out.v).unwrap();
        assert_eq!(b.dissipation(), 0.0);
        assert!(b.defect().abs() < 1e-12);
    }

    #[test]
    fn manufactured_solution_is_recovered() {
        let f = fixture(6, 0.01);
        let p = FluidParams::default();
        let target_u = FluidState::from_fn(&f.mesh, |z, r| [r * (2.0 - r) * (1.0 + z), 0.3 * z * (1.0 - z) * r]).u;
        let target_v: Vec<f64> = f.v.iter().map(|x| 1.5 * x).collect();
        let zero_u = vec![[0.0; 2]; f.mesh.num_nodes()];
        let zero_v = vec![0.0; f.v.len()];
        let base = FluidStepInputs { force_u: &zero_u, force_v: &zero_v, ..inputs(&f, p) };
        // A(x*) x* - b(without forcing) gives the residual the forcing must supply.
        let a = f.solver.assemble_matrix(&base, &target_u).unwrap();
        let x = f.solver.dofs().pack(&target_u, &target_v);
        let need: Vec<f64> = a
            .matvec(&x)
            .iter()
            .zip(f.solver.assemble_rhs(&base).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        // Feed the residual as forcing through the structure mass and a
        // fluid mass solve so it enters exactly as (f, Q).
        let mut mass_params = p;
        mass_params.terms = Terms { advection: false, viscous: false, penalty: false, slip: false };
        let id = AleMap::identity(f.mesh);
        let unit = FluidStepInputs { map_n: &id, map_np1: &id, params: mass_params, ..base };
        let mass = f.solver.assemble_matrix(&unit, &zero_u).unwrap();
        let forcing = mass.factor().unwrap().solve(&need);
        let (fu, fv) = f.solver.dofs().unpack(&forcing);
        let inp = FluidStepInputs { force_u: &fu, force_v: &fv, ..base };
        let out = fluid_substep(&f.solver, &inp).unwrap();
        for (a, b) in out.state.u.iter().zip(&target_u) {
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
        }
        for (a, b) in out.v.iter().zip(&target_v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn mismatched_beam_is_rejected() {
        let mesh = ReferenceMesh::unit(4);
        let op = assemble_elastic(&ElasticParams { elements: 5, ..Default::default() }).unwrap();
        assert!(matches!(FluidSolver::new(mesh, &op), Err(Error::MeshMismatch(_))));
    }
}
