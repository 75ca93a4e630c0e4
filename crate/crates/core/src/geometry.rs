//! Pathwise ALE maps from the reference rectangle onto the deformed domain.
//!
//! A map is the discrete harmonic extension of `id + η` on Γ (identity on
//! the rest of the boundary). All derived quantities (deformation gradient,
//! Jacobian, inverse, interface geometry) are evaluated at the 2x2 Gauss
//! points of the bilinear mesh.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::interface::InterfaceBasis;
use crate::linalg::{BandLu, BandMatrix};
use crate::mesh::{ReferenceMesh, CORNERS};

/// Constant geometry of one interface segment `[z_j, z_{j+1}]` (the trace
/// of a bilinear map is piecewise linear on Γ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeGeometry {
    /// `∂_z (id + η)`, not normalized.
    pub tangent: Vector2<f64>,
    /// Unit outward normal.
    pub normal: Vector2<f64>,
    /// `S_η = |∂_z (id + η)|`.
    pub surface_jacobian: f64,
}

impl EdgeGeometry {
    pub fn unit_tangent(&self) -> Vector2<f64> {
        self.tangent / self.surface_jacobian
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeometryBounds {
    pub j_min: f64,
    pub eta_norm: f64,
    pub injective: bool,
}

#[derive(Clone, Debug)]
pub struct AleMap {
    mesh: ReferenceMesh,
    boundary: Vec<[f64; 2]>,
    displacement: Vec<[f64; 2]>,
    grad: Vec<Matrix2<f64>>,
    inv_grad: Vec<Matrix2<f64>>,
    jacobian: Vec<f64>,
    /// `∂_z ∂_r d`, constant on each cell, repeated per quadrature point.
    mixed: Vec<Vector2<f64>>,
    edges: Vec<EdgeGeometry>,
    injective: bool,
}

impl AleMap {
    pub fn identity(mesh: ReferenceMesh) -> Self {
        Self::from_displacement(mesh, vec![[0.0; 2]; mesh.num_nodes()])
    }

    /// Builds all derived fields from a nodal displacement `d` (`A = id + d`).
    pub fn from_displacement(mesh: ReferenceMesh, displacement: Vec<[f64; 2]>) -> Self {
        assert_eq!(displacement.len(), mesh.num_nodes());
        let table = mesh.shape_table();
        let nq = mesh.num_quad_points();
        let mut grad = Vec::with_capacity(nq);
        let mut inv_grad = Vec::with_capacity(nq);
        let mut jacobian = Vec::with_capacity(nq);
        let mut mixed = Vec::with_capacity(nq);
        let mut corner_positive = true;
        let inv_area = 1.0 / (mesh.hz() * mesh.hr());

        for cell in 0..mesh.num_cells() {
            let nodes = mesh.cell_nodes(cell);
            let mut m = Vector2::zeros();
            for (a, &n) in nodes.iter().enumerate() {
                let s = CORNERS[a].0 * CORNERS[a].1 * inv_area;
                m += Vector2::new(displacement[n][0], displacement[n][1]) * s;
            }
            for s in &table {
                let f = deformation_gradient(&displacement, &nodes, &s.grad);
                let j = f.determinant();
                grad.push(f);
                jacobian.push(j);
                inv_grad.push(if j != 0.0 { adjugate(&f) / j } else { Matrix2::zeros() });
                mixed.push(m);
            }
            for &(cx, cy) in &CORNERS {
                let s = mesh.shape_at_point(cx, cy);
                if deformation_gradient(&displacement, &nodes, &s.grad).determinant() <= 0.0 {
                    corner_positive = false;
                }
            }
        }

        let boundary: Vec<[f64; 2]> = mesh.interface_nodes().map(|n| displacement[n]).collect();
        let hz = mesh.hz();
        let edges: Vec<EdgeGeometry> = boundary
            .windows(2)
            .map(|w| {
                let tangent = Vector2::new(
                    1.0 + (w[1][0] - w[0][0]) / hz,
                    (w[1][1] - w[0][1]) / hz,
                );
                let s = tangent.norm();
                EdgeGeometry {
                    tangent,
                    normal: Vector2::new(-tangent.y, tangent.x) / s,
                    surface_jacobian: s,
                }
            })
            .collect();

        let j_min = jacobian.iter().copied().fold(f64::INFINITY, f64::min);
        let injective = j_min > 0.0 && corner_positive && edges.iter().all(|e| e.tangent.x > 0.0);

        Self {
            mesh,
            boundary,
            displacement,
            grad,
            inv_grad,
            jacobian,
            mixed,
            edges,
            injective,
        }
    }

    pub fn mesh(&self) -> &ReferenceMesh {
        &self.mesh
    }

    pub fn boundary_displacement(&self) -> &[[f64; 2]] {
        &self.boundary
    }

    pub fn displacement(&self) -> &[[f64; 2]] {
        &self.displacement
    }

    pub fn grad(&self) -> &[Matrix2<f64>] {
        &self.grad
    }

    pub fn inv_grad(&self) -> &[Matrix2<f64>] {
        &self.inv_grad
    }

    pub fn jacobian(&self) -> &[f64] {
        &self.jacobian
    }

    pub fn edges(&self) -> &[EdgeGeometry] {
        &self.edges
    }

    pub fn is_injective(&self) -> bool {
        self.injective
    }

    pub fn j_min(&self) -> f64 {
        self.jacobian.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self, basis: &InterfaceBasis, s_exp: f64) -> GeometryBounds {
        GeometryBounds {
            j_min: self.j_min(),
            eta_norm: basis.weighted_norm_vec(&self.boundary, s_exp),
            injective: self.injective,
        }
    }

    fn require_positive(&self) -> Result<()> {
        match self.jacobian.iter().position(|&j| !(j > 0.0)) {
            Some(point) => Err(Error::GeometryDegenerate {
                point,
                jacobian: self.jacobian[point],
            }),
            None => Ok(()),
        }
    }

    fn same_mesh(&self, other: &AleMap) -> Result<()> {
        if self.mesh != other.mesh {
            return Err(Error::MeshMismatch(format!("{:?} vs {:?}", self.mesh, other.mesh)));
        }
        Ok(())
    }

    /// `∂_k F` at quadrature point `q` for `k = 0 (z), 1 (r)`.
    fn grad_derivative(&self, q: usize, k: usize) -> Matrix2<f64> {
        let m = self.mixed[q];
        if k == 0 {
            Matrix2::new(0.0, m.x, 0.0, m.y)
        } else {
            Matrix2::new(m.x, 0.0, m.y, 0.0)
        }
    }
}

fn deformation_gradient(disp: &[[f64; 2]], nodes: &[usize; 4], grads: &[[f64; 2]; 4]) -> Matrix2<f64> {
    let mut f = Matrix2::identity();
    for (a, &n) in nodes.iter().enumerate() {
        for c in 0..2 {
            for k in 0..2 {
                f[(c, k)] += disp[n][c] * grads[a][k];
            }
        }
    }
    f
}

/// `adj(F) = J F^{-1}` in two dimensions.
#[inline]
pub fn adjugate(f: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(f[(1, 1)], -f[(0, 1)], -f[(1, 0)], f[(0, 0)])
}

/// Reusable solver for the discrete Laplace problem on a fixed mesh.
///
/// Only the interface carries nonzero Dirichlet data, so a single banded
/// factorization of the interior stiffness serves every map on the mesh.
#[derive(Clone, Debug)]
pub struct HarmonicExtender {
    mesh: ReferenceMesh,
    lu: BandLu,
    local: [[f64; 4]; 4],
}

impl HarmonicExtender {
    pub fn new(mesh: ReferenceMesh) -> Result<Self> {
        let table = mesh.shape_table();
        let cj = mesh.cell_jacobian();
        let mut local = [[0.0; 4]; 4];
        for s in &table {
            for a in 0..4 {
                for b in 0..4 {
                    local[a][b] += s.weight
                        * cj
                        * (s.grad[a][0] * s.grad[b][0] + s.grad[a][1] * s.grad[b][1]);
                }
            }
        }
        let ni = Self::interior_count(&mesh);
        let bw = mesh.nr; // neighbours across a column differ by nr - 1 interior rows
        let mut k = BandMatrix::zeros(ni, bw, bw);
        for cell in 0..mesh.num_cells() {
            let nodes = mesh.cell_nodes(cell);
            for a in 0..4 {
                let Some(ia) = interior_index(&mesh, nodes[a]) else { continue };
                for b in 0..4 {
                    if let Some(ib) = interior_index(&mesh, nodes[b]) {
                        k.add(ia, ib, local[a][b]);
                    }
                }
            }
        }
        let lu = k.factor()?;
        Ok(Self { mesh, lu, local })
    }

    fn interior_count(mesh: &ReferenceMesh) -> usize {
        (mesh.nz - 1) * (mesh.nr - 1)
    }

    pub fn mesh(&self) -> &ReferenceMesh {
        &self.mesh
    }

    /// Harmonic extension of scalar interface data (`nz + 1` values), zero
    /// on the rest of the boundary. Returns nodal values on the whole mesh.
    pub fn extend_scalar(&self, top: &[f64]) -> Result<Vec<f64>> {
        let mesh = &self.mesh;
        if top.len() != mesh.nz + 1 {
            return Err(Error::InvalidInput(format!(
                "interface data has {} values, mesh needs {}",
                top.len(),
                mesh.nz + 1
            )));
        }
        let mut nodal = vec![0.0; mesh.num_nodes()];
        for (j, &v) in top.iter().enumerate() {
            nodal[mesh.node_id(j, mesh.nr)] = v;
        }
        // Corner values of the interface data override the zero data of
        // Γ_in / Γ_out; clamping makes them vanish anyway.
        let mut rhs = vec![0.0; Self::interior_count(mesh)];
        for j in 0..mesh.nz {
            let cell = mesh.cell_id(j, mesh.nr - 1);
            let nodes = mesh.cell_nodes(cell);
            for a in 0..4 {
                let Some(ia) = interior_index(mesh, nodes[a]) else { continue };
                for b in 0..4 {
                    if interior_index(mesh, nodes[b]).is_none() {
                        rhs[ia] -= self.local[a][b] * nodal[nodes[b]];
                    }
                }
            }
        }
        self.lu.solve_in_place(&mut rhs);
        for j in 1..mesh.nz {
            for i in 1..mesh.nr {
                let id = mesh.node_id(j, i);
                nodal[id] = rhs[interior_index(mesh, id).unwrap()];
            }
        }
        Ok(nodal)
    }

    /// The ALE map `A_η` for interface displacement `eta` (one 2-vector per
    /// interface node, clamped so `eta[0] = eta[nz] = 0`).
    pub fn extend(&self, eta: &[[f64; 2]]) -> Result<AleMap> {
        let nz = self.mesh.nz;
        if eta.len() != nz + 1 {
            return Err(Error::InvalidInput(format!(
                "interface displacement has {} nodes, mesh needs {}",
                eta.len(),
                nz + 1
            )));
        }
        let end = eta[0][0].abs().max(eta[0][1].abs()).max(eta[nz][0].abs()).max(eta[nz][1].abs());
        if end > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "interface displacement must vanish at z=0 and z=L (found {end:.3e})"
            )));
        }
        let ez: Vec<f64> = eta.iter().map(|v| v[0]).collect();
        let er: Vec<f64> = eta.iter().map(|v| v[1]).collect();
        let dz = self.extend_scalar(&ez)?;
        let dr = self.extend_scalar(&er)?;
        let disp = dz.into_iter().zip(dr).map(|(a, b)| [a, b]).collect();
        Ok(AleMap::from_displacement(self.mesh, disp))
    }
}

fn interior_index(mesh: &ReferenceMesh, id: usize) -> Option<usize> {
    let (j, i) = mesh.node_ij(id);
    if j == 0 || j == mesh.nz || i == 0 || i == mesh.nr {
        None
    } else {
        Some((j - 1) * (mesh.nr - 1) + (i - 1))
    }
}

/// One-shot harmonic extension; prefer [`HarmonicExtender`] when building
/// many maps on the same mesh.
pub fn harmonic_extension(mesh: ReferenceMesh, eta: &[[f64; 2]]) -> Result<AleMap> {
    HarmonicExtender::new(mesh)?.extend(eta)
}

/// Returns `(‖w‖_{L²(O)}, ‖v‖_{H^{-1/2}(Γ)})` for the harmonic extension
/// `w` of scalar interface data `v`.
pub fn harmonic_extension_scalar_bound_check(mesh: ReferenceMesh, v: &[f64]) -> Result<(f64, f64)> {
    let ext = HarmonicExtender::new(mesh)?;
    let w = ext.extend_scalar(v)?;
    let nodal: Vec<[f64; 2]> = w.iter().map(|&x| [x, 0.0]).collect();
    let lhs = mesh.l2_norm(&nodal);
    let basis = InterfaceBasis::new(mesh.length, mesh.nz);
    Ok((lhs, basis.weighted_norm(v, -0.5)))
}

/// A vector field sampled at quadrature points together with its gradient
/// in reference coordinates, `grads[q][(c, k)] = ∂_k u_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadField {
    pub values: Vec<Vector2<f64>>,
    pub grads: Vec<Matrix2<f64>>,
}

impl QuadField {
    pub fn from_nodal(mesh: &ReferenceMesh, nodal: &[[f64; 2]]) -> Self {
        assert_eq!(nodal.len(), mesh.num_nodes());
        let table = mesh.shape_table();
        let mut values = Vec::with_capacity(mesh.num_quad_points());
        let mut grads = Vec::with_capacity(mesh.num_quad_points());
        for cell in 0..mesh.num_cells() {
            let nodes = mesh.cell_nodes(cell);
            for s in &table {
                let mut v = Vector2::zeros();
                let mut g = Matrix2::zeros();
                for (a, &n) in nodes.iter().enumerate() {
                    let u = Vector2::new(nodal[n][0], nodal[n][1]);
                    v += u * s.value[a];
                    for k in 0..2 {
                        g[(0, k)] += u.x * s.grad[a][k];
                        g[(1, k)] += u.y * s.grad[a][k];
                    }
                }
                values.push(v);
                grads.push(g);
            }
        }
        Self { values, grads }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }
}

/// `∇^η u = ∇u (∇A)^{-1}` at every quadrature point.
#[derive(Clone, Debug)]
pub struct TransformedGradient {
    pub tensors: Vec<Matrix2<f64>>,
}

impl TransformedGradient {
    /// `D^η(u) = ½(∇^η u + (∇^η u)ᵀ)`.
    pub fn sym(&self, q: usize) -> Matrix2<f64> {
        let g = &self.tensors[q];
        (g + g.transpose()) * 0.5
    }

    /// `div^η u = tr(∇^η u)`.
    pub fn div(&self, q: usize) -> f64 {
        self.tensors[q].trace()
    }

    pub fn divergence(&self) -> Vec<f64> {
        (0..self.tensors.len()).map(|q| self.div(q)).collect()
    }
}

pub fn transformed_gradient(u: &QuadField, map: &AleMap) -> Result<TransformedGradient> {
    if u.len() != map.jacobian.len() {
        return Err(Error::MeshMismatch("field and map quadrature sizes differ".into()));
    }
    map.require_positive()?;
    let tensors = u.grads.iter().zip(&map.inv_grad).map(|(g, fi)| g * fi).collect();
    Ok(TransformedGradient { tensors })
}

/// Contravariant Piola transfer of `u` from the configuration of `from`
/// to that of `to`: `J_to^{-1} ∇A_to (J_from (∇A_from)^{-1} u)`.
///
/// The gradient of the result is carried exactly (product rule through the
/// bilinear deformation gradients), so the divergence identity
/// `J_to div^{to}(result) = J_from div^{from}(u)` holds pointwise.
pub fn piola_transform(u: &QuadField, from: &AleMap, to: &AleMap) -> Result<QuadField> {
    from.same_mesh(to)?;
    if u.len() != from.jacobian.len() {
        return Err(Error::MeshMismatch("field and map quadrature sizes differ".into()));
    }
    from.require_positive()?;
    to.require_positive()?;
    let mut values = Vec::with_capacity(u.len());
    let mut grads = Vec::with_capacity(u.len());
    for q in 0..u.len() {
        let f0 = from.grad[q];
        let f1 = to.grad[q];
        let adj0 = adjugate(&f0);
        let pulled = adj0 * u.values[q];
        let pushed = f1 * pulled;
        let j1 = to.jacobian[q];
        let adj1 = adjugate(&f1);
        let mut g = Matrix2::zeros();
        for k in 0..2 {
            let d_pulled = adjugate(&from.grad_derivative(q, k)) * u.values[q]
                + adj0 * u.grads[q].column(k);
            let df1 = to.grad_derivative(q, k);
            let d_pushed = df1 * pulled + f1 * d_pulled;
            let dj1 = (adj1 * df1).trace();
            let col = d_pushed / j1 - pushed * (dj1 / (j1 * j1));
            g.set_column(k, &col);
        }
        values.push(pushed / j1);
        grads.push(g);
    }
    Ok(QuadField { values, grads })
}

/// Nodal ALE velocity `(d_next - d_prev) / dt`.
pub fn ale_velocity(prev: &AleMap, next: &AleMap, dt: f64) -> Result<Vec<[f64; 2]>> {
    prev.same_mesh(next)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    Ok(prev
        .displacement
        .iter()
        .zip(&next.displacement)
        .map(|(a, b)| [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt])
        .collect())
}

/// Discrete L² norm of `(J_next - J_prev)/dt - J_prev div^{prev} w` with
/// `w` the ALE velocity between the two maps. First order in `dt` for a
/// smooth family of maps.
pub fn jacobian_identity_residual(prev: &AleMap, next: &AleMap, dt: f64) -> Result<f64> {
    let w = ale_velocity(prev, next, dt)?;
    let wf = QuadField::from_nodal(&prev.mesh, &w);
    let div = transformed_gradient(&wf, prev)?.divergence();
    let weights = prev.mesh.quad_weights();
    let sum: f64 = (0..div.len())
        .map(|q| {
            let r = (next.jacobian[q] - prev.jacobian[q]) / dt - prev.jacobian[q] * div[q];
            weights[q] * r * r
        })
        .sum();
    Ok(sum.sqrt())
}
