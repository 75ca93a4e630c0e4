//! Structured bilinear mesh of the reference rectangle `(0, L) x (0, 1)`.
//!
//! Nodes are numbered column by column: node `(j, i)` with axial index
//! `j ∈ 0..=nz` and radial index `i ∈ 0..=nr` has id `j * (nr + 1) + i`.
//! Cells carry a 2x2 Gauss rule; quadrature point `k` of cell `c` has global
//! index `4 * c + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GAUSS2;

/// Reference-element corner signs in counter-clockwise order.
pub const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMesh {
    pub length: f64,
    pub nz: usize,
    pub nr: usize,
}

/// Which part of the boundary a node lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryPart {
    /// Γ, the deformable top boundary `r = 1`.
    Interface,
    /// Γ_in at `z = 0`.
    Inlet,
    /// Γ_out at `z = L`.
    Outlet,
    /// Γ_b, the symmetry axis `r = 0`.
    Bottom,
}

/// Basis values and reference-coordinate gradients of the four bilinear
/// shape functions at one Gauss point.
#[derive(Clone, Copy, Debug)]
pub struct ShapeEval {
    pub value: [f64; 4],
    pub grad: [[f64; 2]; 4],
    pub weight: f64,
    /// Reference-element coordinates of the point.
    pub xi: (f64, f64),
}

impl ReferenceMesh {
    pub fn new(length: f64, nz: usize, nr: usize) -> Result<Self> {
        if nz < 2 || nr < 2 {
            return Err(Error::InvalidInput(format!(
                "mesh needs at least 2 cells per direction, got nz={nz}, nr={nr}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidInput(format!("mesh length must be positive, got {length}")));
        }
        Ok(Self { length, nz, nr })
    }

    pub fn unit(n: usize) -> Self {
        Self::new(1.0, n, n).expect("valid unit mesh")
    }

    #[inline]
    pub fn hz(&self) -> f64 {
        self.length / self.nz as f64
    }

    #[inline]
    pub fn hr(&self) -> f64 {
        1.0 / self.nr as f64
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        (self.nz + 1) * (self.nr + 1)
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.nz * self.nr
    }

    #[inline]
    pub fn num_quad_points(&self) -> usize {
        4 * self.num_cells()
    }

    #[inline]
    pub fn node_id(&self, j: usize, i: usize) -> usize {
        j * (self.nr + 1) + i
    }

    #[inline]
    pub fn node_ij(&self, id: usize) -> (usize, usize) {
        (id / (self.nr + 1), id % (self.nr + 1))
    }

    pub fn node_coords(&self, id: usize) -> [f64; 2] {
        let (j, i) = self.node_ij(id);
        let z = if j == self.nz { self.length } else { j as f64 * self.hz() };
        let r = if i == self.nr { 1.0 } else { i as f64 * self.hr() };
        [z, r]
    }

    /// Interface node ids ordered by increasing `z`.
    pub fn interface_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.nz).map(move |j| self.node_id(j, self.nr))
    }

    pub fn on_boundary(&self, id: usize, part: BoundaryPart) -> bool {
        let (j, i) = self.node_ij(id);
        match part {
            BoundaryPart::Interface => i == self.nr,
            BoundaryPart::Inlet => j == 0,
            BoundaryPart::Outlet => j == self.nz,
            BoundaryPart::Bottom => i == 0,
        }
    }

    pub fn is_boundary(&self, id: usize) -> bool {
        let (j, i) = self.node_ij(id);
        j == 0 || j == self.nz || i == 0 || i == self.nr
    }

    /// Radial velocity is constrained on Γ_in, Γ_out and Γ_b (closures included).
    pub fn radial_constrained(&self, id: usize) -> bool {
        let (j, i) = self.node_ij(id);
        j == 0 || j == self.nz || i == 0
    }

    #[inline]
    pub fn cell_id(&self, j: usize, i: usize) -> usize {
        j * self.nr + i
    }

    /// Node ids of cell `(j, i)` in [`CORNERS`] order.
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let (j, i) = (cell / self.nr, cell % self.nr);
        [
            self.node_id(j, i),
            self.node_id(j + 1, i),
            self.node_id(j + 1, i + 1),
            self.node_id(j, i + 1),
        ]
    }

    pub fn cell_origin(&self, cell: usize) -> [f64; 2] {
        let (j, i) = (cell / self.nr, cell % self.nr);
        [j as f64 * self.hz(), i as f64 * self.hr()]
    }

    /// Area element of the 2x2 Gauss rule (weights folded into [`ShapeEval`]).
    #[inline]
    pub fn cell_jacobian(&self) -> f64 {
        0.25 * self.hz() * self.hr()
    }

    /// Shape data at the four Gauss points of any cell, gradients taken
    /// with respect to the physical reference coordinates `(z, r)`.
    pub fn shape_table(&self) -> [ShapeEval; 4] {
        let sz = 2.0 / self.hz();
        let sr = 2.0 / self.hr();
        let pts = [
            (GAUSS2[0], GAUSS2[0]),
            (GAUSS2[1], GAUSS2[0]),
            (GAUSS2[1], GAUSS2[1]),
            (GAUSS2[0], GAUSS2[1]),
        ];
        pts.map(|((x, wx), (y, wy))| self.shape_at(x, y, wx * wy, sz, sr))
    }

    /// Shape data at an arbitrary reference-element point.
    pub fn shape_at_point(&self, xi: f64, eta: f64) -> ShapeEval {
        self.shape_at(xi, eta, 1.0, 2.0 / self.hz(), 2.0 / self.hr())
    }

    fn shape_at(&self, x: f64, y: f64, weight: f64, sz: f64, sr: f64) -> ShapeEval {
        let mut value = [0.0; 4];
        let mut grad = [[0.0; 2]; 4];
        for (a, &(ca, da)) in CORNERS.iter().enumerate() {
            value[a] = 0.25 * (1.0 + ca * x) * (1.0 + da * y);
            grad[a] = [0.25 * ca * (1.0 + da * y) * sz, 0.25 * da * (1.0 + ca * x) * sr];
        }
        ShapeEval { value, grad, weight, xi: (x, y) }
    }

    /// Physical coordinates of every quadrature point.
    pub fn quad_coords(&self) -> Vec<[f64; 2]> {
        let table = self.shape_table();
        let mut out = Vec::with_capacity(self.num_quad_points());
        for cell in 0..self.num_cells() {
            let [z0, r0] = self.cell_origin(cell);
            for s in &table {
                out.push([
                    z0 + 0.5 * self.hz() * (1.0 + s.xi.0),
                    r0 + 0.5 * self.hr() * (1.0 + s.xi.1),
                ]);
            }
        }
        out
    }

    /// Quadrature weights (including the area element) per quadrature point.
    pub fn quad_weights(&self) -> Vec<f64> {
        let table = self.shape_table();
        let cj = self.cell_jacobian();
        (0..self.num_quad_points()).map(|q| table[q % 4].weight * cj).collect()
    }

    /// Interpolates a nodal vector field at every quadrature point.
    pub fn interpolate(&self, field: &[[f64; 2]]) -> Vec<[f64; 2]> {
        assert_eq!(field.len(), self.num_nodes());
        let table = self.shape_table();
        let mut out = Vec::with_capacity(self.num_quad_points());
        for cell in 0..self.num_cells() {
            let nodes = self.cell_nodes(cell);
            for s in &table {
                let mut v = [0.0; 2];
                for (a, &n) in nodes.iter().enumerate() {
                    v[0] += s.value[a] * field[n][0];
                    v[1] += s.value[a] * field[n][1];
                }
                out.push(v);
            }
        }
        out
    }

    /// Discrete L²(O) norm of a nodal vector field with the 2x2 Gauss rule.
    pub fn l2_norm(&self, field: &[[f64; 2]]) -> f64 {
        self.weighted_l2_sq(field, None).sqrt()
    }

    /// `∫ weight |u|²` with an optional per-quadrature-point weight.
    pub fn weighted_l2_sq(&self, field: &[[f64; 2]], weight: Option<&[f64]>) -> f64 {
        let vals = self.interpolate(field);
        let w = self.quad_weights();
        vals.iter()
            .enumerate()
            .map(|(q, v)| w[q] * weight.map_or(1.0, |j| j[q]) * (v[0] * v[0] + v[1] * v[1]))
            .sum()
    }

    /// `∫ u · q` for two nodal fields.
    pub fn l2_inner(&self, a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        let va = self.interpolate(a);
        let vb = self.interpolate(b);
        let w = self.quad_weights();
        (0..va.len()).map(|q| w[q] * (va[q][0] * vb[q][0] + va[q][1] * vb[q][1])).sum()
    }

    /// Nodal interpolation of a pointwise function.
    pub fn sample(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<[f64; 2]> {
        (0..self.num_nodes())
            .map(|id| {
                let [z, r] = self.node_coords(id);
                f(z, r)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_cover_rectangle() {
        let m = ReferenceMesh::new(2.5, 5, 3).unwrap();
        let coords: Vec<_> = (0..m.num_nodes()).map(|n| m.node_coords(n)).collect();
        let zmax = coords.iter().map(|c| c[0]).fold(f64::MIN, f64::max);
        let rmax = coords.iter().map(|c| c[1]).fold(f64::MIN, f64::max);
        assert_eq!(zmax, 2.5);
        assert_eq!(rmax, 1.0);
        assert_eq!(coords[0], [0.0, 0.0]);
    }

    #[test]
    fn boundary_sets_cover_the_boundary() {
        let m = ReferenceMesh::new(1.0, 4, 3).unwrap();
        let parts = [
            BoundaryPart::Interface,
            BoundaryPart::Inlet,
            BoundaryPart::Outlet,
            BoundaryPart::Bottom,
        ];
        for id in 0..m.num_nodes() {
            let hits = parts.iter().filter(|p| m.on_boundary(id, **p)).count();
            let (j, i) = m.node_ij(id);
            let corner = (j == 0 || j == m.nz) && (i == 0 || i == m.nr);
            assert_eq!(hits > 0, m.is_boundary(id));
            assert!(hits <= 1 || corner, "node {id} on {hits} parts");
        }
    }

    #[test]
    fn rejects_degenerate_mesh() {
        assert!(ReferenceMesh::new(1.0, 1, 4).is_err());
        assert!(ReferenceMesh::new(0.0, 4, 4).is_err());
    }

    #[test]
    fn quadrature_integrates_area_and_moments() {
        let m = ReferenceMesh::new(3.0, 6, 4).unwrap();
        let w = m.quad_weights();
        let x = m.quad_coords();
        let area: f64 = w.iter().sum();
        assert!((area - 3.0).abs() < 1e-13);
        let zr: f64 = w.iter().zip(&x).map(|(w, p)| w * p[0] * p[1] * p[1]).sum();
        assert!((zr - 4.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_bilinear_fields() {
        let m = ReferenceMesh::new(2.0, 3, 5).unwrap();
        let f = |z: f64, r: f64| [1.0 + z - 2.0 * r + z * r, 0.5 * z * r];
        let nodal = m.sample(f);
        for (v, p) in m.interpolate(&nodal).iter().zip(m.quad_coords()) {
            let e = f(p[0], p[1]);
            assert!((v[0] - e[0]).abs() < 1e-13 && (v[1] - e[1]).abs() < 1e-13);
        }
    }
}
