//! Clamped beam: cubic Hermite discretization of `η = (η_z, η_r)` on
//! `(0, L)` and the implicit structure half-step.
//!
//! Scalar degrees of freedom are the value and slope at the interior
//! nodes `1..elements`; scalar dof `(j - 1) * 2 + k` belongs to node `j`.
//! Vector coefficient arrays interleave the two components node by node:
//! index `(j - 1) * 4 + c * 2 + k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{BandLu, BandMatrix};
use crate::quadrature::{on_interval, GAUSS4};

/// Values, first and second derivatives of the four Hermite shape
/// functions at local coordinate `t ∈ [0, 1]` on an element of size `h`.
pub fn hermite_basis(t: f64, h: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let v = [
        1.0 - 3.0 * t2 + 2.0 * t3,
        h * (t - 2.0 * t2 + t3),
        3.0 * t2 - 2.0 * t3,
        h * (t3 - t2),
    ];
    let d1 = [
        (-6.0 * t + 6.0 * t2) / h,
        1.0 - 4.0 * t + 3.0 * t2,
        (6.0 * t - 6.0 * t2) / h,
        3.0 * t2 - 2.0 * t,
    ];
    let d2 = [
        (-6.0 + 12.0 * t) / (h * h),
        (-4.0 + 6.0 * t) / h,
        (6.0 - 12.0 * t) / (h * h),
        (6.0 * t - 2.0) / h,
    ];
    (v, d1, d2)
}

/// H²_0-conforming cubic Hermite space on a uniform grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteSpace {
    pub length: f64,
    pub elements: usize,
}

impl HermiteSpace {
    pub fn new(length: f64, elements: usize) -> Result<Self> {
        if elements < 2 {
            return Err(Error::InvalidInput(format!(
                "beam needs at least 2 elements, got {elements}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidInput(format!("beam length must be positive, got {length}")));
        }
        Ok(Self { length, elements })
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.length / self.elements as f64
    }

    pub fn scalar_dim(&self) -> usize {
        2 * (self.elements - 1)
    }

    /// Length of a vector coefficient array.
    pub fn dim(&self) -> usize {
        4 * (self.elements - 1)
    }

    /// Scalar dof of local shape function `a` on element `e`, `None` when clamped.
    pub fn local_dof(&self, e: usize, a: usize) -> Option<usize> {
        let node = e + a / 2;
        if node == 0 || node == self.elements {
            None
        } else {
            Some((node - 1) * 2 + a % 2)
        }
    }

    /// Vector index of scalar dof `s` for component `c`.
    #[inline]
    pub fn vector_index(s: usize, c: usize) -> usize {
        (s / 2) * 4 + c * 2 + s % 2
    }

    /// Value of a vector coefficient array at local coordinate `t` on element `e`.
    pub fn eval_on_element(&self, coeffs: &[f64], e: usize, t: f64) -> [f64; 2] {
        let (v, _, _) = hermite_basis(t, self.h());
        let mut out = [0.0; 2];
        for a in 0..4 {
            if let Some(s) = self.local_dof(e, a) {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += v[a] * coeffs[Self::vector_index(s, c)];
                }
            }
        }
        out
    }

    pub fn eval(&self, coeffs: &[f64], x: f64) -> [f64; 2] {
        let h = self.h();
        let e = ((x / h).floor() as usize).min(self.elements - 1);
        self.eval_on_element(coeffs, e, (x - e as f64 * h) / h)
    }

    /// Nodal values at `0, h, ..., L` (zero at the clamped ends).
    pub fn nodal_values(&self, coeffs: &[f64]) -> Vec<[f64; 2]> {
        assert_eq!(coeffs.len(), self.dim());
        let mut out = vec![[0.0; 2]; self.elements + 1];
        for (j, o) in out.iter_mut().enumerate().take(self.elements).skip(1) {
            let s = (j - 1) * 2;
            *o = [coeffs[Self::vector_index(s, 0)], coeffs[Self::vector_index(s, 1)]];
        }
        out
    }

    /// Hermite interpolant from pointwise values and derivatives
    /// (`f(x) -> (value, derivative)` per component).
    pub fn interpolate(&self, f: impl Fn(f64) -> ([f64; 2], [f64; 2])) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for j in 1..self.elements {
            let (val, der) = f(j as f64 * self.h());
            let s = (j - 1) * 2;
            for c in 0..2 {
                out[Self::vector_index(s, c)] = val[c];
                out[Self::vector_index(s + 1, c)] = der[c];
            }
        }
        out
    }

    /// Assembles `∫ a(φ_i) a(φ_j)` for scalar shape data picked by `pick`,
    /// expanded to both components.
    fn assemble(&self, pick: impl Fn(&([f64; 4], [f64; 4], [f64; 4])) -> [f64; 4]) -> BandMatrix {
        let h = self.h();
        let mut local = [[0.0; 4]; 4];
        for (t, w) in on_interval(&GAUSS4, 0.0, 1.0) {
            let b = pick(&hermite_basis(t, h));
            for a in 0..4 {
                for c in 0..4 {
                    local[a][c] += w * h * b[a] * b[c];
                }
            }
        }
        let mut m = BandMatrix::zeros(self.dim(), 7, 7);
        for e in 0..self.elements {
            for a in 0..4 {
                let Some(sa) = self.local_dof(e, a) else { continue };
                for b in 0..4 {
                    let Some(sb) = self.local_dof(e, b) else { continue };
                    for c in 0..2 {
                        m.add(Self::vector_index(sa, c), Self::vector_index(sb, c), local[a][b]);
                    }
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub length: f64,
    pub elements: usize,
    /// `c_b` in `L_e η = c_b ∂⁴η + c_0 η`.
    pub bending: f64,
    pub zeroth_order: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            length: 1.0,
            elements: 16,
            bending: 1.0,
            zeroth_order: 0.0,
        }
    }
}

/// Mass `M`, regularization `R = (∂_zz ·, ∂_zz ·)` and stiffness
/// `K = c_b R + c_0 M` on the clamped Hermite space.
#[derive(Clone, Debug)]
pub struct ElasticOperator {
    pub space: HermiteSpace,
    pub bending: f64,
    pub zeroth_order: f64,
    pub mass: BandMatrix,
    pub regularization: BandMatrix,
    pub stiffness: BandMatrix,
}

pub fn assemble_elastic(params: &ElasticParams) -> Result<ElasticOperator> {
    if !(params.bending > 0.0) {
        return Err(Error::Coercivity(format!(
            "bending coefficient must be positive, got {}",
            params.bending
        )));
    }
    if !(params.zeroth_order >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "zeroth-order coefficient must be nonnegative, got {}",
            params.zeroth_order
        )));
    }
    let space = HermiteSpace::new(params.length, params.elements)?;
    let mass = space.assemble(|b| b.0);
    let regularization = space.assemble(|b| b.2);
    let mut stiffness = BandMatrix::zeros(space.dim(), 7, 7);
    stiffness.axpy(params.bending, &regularization);
    stiffness.axpy(params.zeroth_order, &mass);
    Ok(ElasticOperator {
        space,
        bending: params.bending,
        zeroth_order: params.zeroth_order,
        mass,
        regularization,
        stiffness,
    })
}

fn to_dense(m: &BandMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.dim(), m.dim(), |i, j| m.get(i, j))
}

impl ElasticOperator {
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Smallest eigenvalue of `K φ = λ M φ`.
    pub fn min_generalized_eigenvalue(&self) -> f64 {
        let m = to_dense(&self.mass);
        let k = to_dense(&self.stiffness);
        let chol = m.cholesky().expect("Hermite mass matrix is SPD");
        let linv = chol.l().try_inverse().expect("invertible Cholesky factor");
        let reduced = &linv * k * linv.transpose();
        let sym = (&reduced + reduced.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    }

    /// `‖η‖_{L²}² = ηᵀ M η`.
    pub fn l2_norm_sq(&self, x: &[f64]) -> f64 {
        self.mass.bilinear(x, x)
    }

    /// `‖η‖_{H²_0}² = ηᵀ K η`.
    pub fn energy_norm_sq(&self, x: &[f64]) -> f64 {
        self.stiffness.bilinear(x, x)
    }

    /// `‖∂_zz η‖²`.
    pub fn curvature_norm_sq(&self, x: &[f64]) -> f64 {
        self.regularization.bilinear(x, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureState {
    pub eta: Vec<f64>,
    pub v: Vec<f64>,
}

impl StructureState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            eta: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// Structure half-step solver with the factorization of
/// `M + Δt² K + εΔt R` cached for the last `(dt, eps)`.
#[derive(Clone, Debug)]
pub struct StructureSolver {
    op: ElasticOperator,
    cached: Option<(u64, u64, BandLu)>,
}

impl StructureSolver {
    pub fn new(op: ElasticOperator) -> Self {
        Self { op, cached: None }
    }

    pub fn operator(&self) -> &ElasticOperator {
        &self.op
    }

    fn factor(&mut self, dt: f64, eps: f64) -> Result<&BandLu> {
        let key = (dt.to_bits(), eps.to_bits());
        let stale = !matches!(&self.cached, Some((a, b, _)) if (*a, *b) == key);
        if stale {
            let mut a = self.op.mass.clone();
            a.axpy(dt * dt, &self.op.stiffness);
            a.axpy(eps * dt, &self.op.regularization);
            self.cached = Some((key.0, key.1, a.factor()?));
        }
        Ok(&self.cached.as_ref().unwrap().2)
    }

    /// Solves `(v' - v, ψ) + Δt⟨L_e η', ψ⟩ + εΔt(∂_zz v', ∂_zz ψ) = 0` with
    /// `η' = η + Δt v'`.
    pub fn substep(&mut self, state: &StructureState, dt: f64, eps: f64) -> Result<StructureState> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        if !(eps >= 0.0) {
            return Err(Error::InvalidInput(format!("eps must be nonnegative, got {eps}")));
        }
        let n = self.op.dim();
        if state.eta.len() != n || state.v.len() != n {
            return Err(Error::InvalidInput(format!(
                "structure state has lengths ({}, {}), operator needs {n}",
                state.eta.len(),
                state.v.len()
            )));
        }
        let mv = self.op.mass.matvec(&state.v);
        let ke = self.op.stiffness.matvec(&state.eta);
        let mut rhs: Vec<f64> = mv.iter().zip(&ke).map(|(a, b)| a - dt * b).collect();
        self.factor(dt, eps)?.solve_in_place(&mut rhs);
        let eta = state.eta.iter().zip(&rhs).map(|(e, v)| e + dt * v).collect();
        Ok(StructureState { eta, v: rhs })
    }
}

pub fn structure_substep(
    state: &StructureState,
    op: &ElasticOperator,
    dt: f64,
    eps: f64,
) -> Result<StructureState> {
    StructureSolver::new(op.clone()).substep(state, dt, eps)
}

/// `(½ vᵀMv, ½ ηᵀKη)`.
pub fn structure_energy(state: &StructureState, op: &ElasticOperator) -> (f64, f64) {
    (0.5 * op.l2_norm_sq(&state.v), 0.5 * op.energy_norm_sq(&state.eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(elements: usize, c0: f64) -> ElasticOperator {
        assemble_elastic(&ElasticParams {
            length: 1.3,
            elements,
            bending: 0.8,
            zeroth_order: c0,
        })
        .unwrap()
    }

    fn smooth_state(space: &HermiteSpace) -> StructureState {
        let l = space.length;
        let eta = space.interpolate(|x| {
            let b = x * x * (l - x) * (l - x);
            let db = 2.0 * x * (l - x) * (l - 2.0 * x);
            ([0.3 * b, b], [0.3 * db, db])
        });
        let v = space.interpolate(|x| {
            let s = (std::f64::consts::PI * x / l).sin().powi(2);
            let ds = std::f64::consts::PI / l * (2.0 * std::f64::consts::PI * x / l).sin();
            ([-s, 0.5 * s], [-ds, 0.5 * ds])
        });
        StructureState { eta, v }
    }

    #[test]
    fn matrices_are_symmetric_and_coercive() {
        let o = op(8, 0.5);
        for m in [&o.mass, &o.stiffness, &o.regularization] {
            let d = to_dense(m);
            assert!((&d - d.transpose()).amax() < 1e-12);
        }
        assert!(o.min_generalized_eigenvalue() > 0.0);
        let r = to_dense(&o.regularization);
        assert!(r.symmetric_eigen().eigenvalues.min() > -1e-10);
    }

    #[test]
    fn zero_bending_is_rejected() {
        let p = ElasticParams { bending: 0.0, ..Default::default() };
        assert!(matches!(assemble_elastic(&p), Err(Error::Coercivity(_))));
    }

    #[test]
    fn stiffness_matches_fourth_derivative_pairing() {
        // p = z²(L-z)² has p'''' = 24 and clamped ends, so ⟨K I p, φ⟩ = 24 c_b ∫ φ.
        let o = op(10, 0.0);
        let l = o.space.length;
        let p = o.space.interpolate(|x| {
            let b = x * x * (l - x) * (l - x);
            let db = 2.0 * x * (l - x) * (l - 2.0 * x);
            ([b, 0.0], [db, 0.0])
        });
        let kp = o.stiffness.matvec(&p);
        let h = o.space.h();
        let mut integral = vec![0.0; o.dim()];
        for e in 0..o.space.elements {
            for (t, w) in on_interval(&GAUSS4, 0.0, 1.0) {
                let (v, _, _) = hermite_basis(t, h);
                for a in 0..4 {
                    if let Some(s) = o.space.local_dof(e, a) {
                        integral[HermiteSpace::vector_index(s, 0)] += w * h * v[a];
                    }
                }
            }
        }
        for i in 0..o.dim() {
            assert!((kp[i] - 24.0 * o.bending * integral[i]).abs() < 1e-10, "dof {i}");
        }
        assert!(o.stiffness.matvec(&vec![0.0; o.dim()]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hermite_interpolation_reproduces_cubics() {
        let s = HermiteSpace::new(2.0, 5).unwrap();
        let f = |x: f64| x * (2.0 - x) * (2.0 - x);
        let df = |x: f64| (2.0 - x) * (2.0 - x) - 2.0 * x * (2.0 - x);
        let c = s.interpolate(|x| ([f(x), 0.0], [df(x), 0.0]));
        let nodal = s.nodal_values(&c);
        for (j, v) in nodal.iter().enumerate().skip(1).take(4) {
            assert!((v[0] - f(j as f64 * s.h())).abs() < 1e-14);
        }
        let mid = s.eval(&c, 0.5 * s.h() + 2.0 * s.h());
        assert!((mid[0] - f(2.5 * s.h())).abs() < 1e-12);
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let o = op(6, 0.0);
        let s = structure_substep(&StructureState::zeros(o.dim()), &o, 0.1, 0.01).unwrap();
        assert!(s.eta.iter().chain(&s.v).all(|&x| x == 0.0));
    }

    #[test]
    fn single_mode_follows_closed_form_update() {
        let o = op(6, 0.4);
        let m = to_dense(&o.mass);
        let k = to_dense(&o.stiffness);
        let chol = m.clone().cholesky().unwrap();
        let linv = chol.l().try_inverse().unwrap();
        let eig = (&linv * &k * linv.transpose()).symmetric_eigen();
        let (dt, eps) = (0.05, 0.02);
        for idx in [0, 3, 7] {
            let lambda = eig.eigenvalues[idx];
            let mu = (lambda - o.zeroth_order) / o.bending;
            let phi = linv.transpose() * eig.eigenvectors.column(idx);
            let (a, b) = (0.7, -1.1);
            let state = StructureState {
                eta: phi.iter().map(|x| a * x).collect(),
                v: phi.iter().map(|x| b * x).collect(),
            };
            let next = structure_substep(&state, &o, dt, eps).unwrap();
            let vb = (b - dt * lambda * a) / (1.0 + dt * dt * lambda + eps * dt * mu);
            let eb = a + dt * vb;
            for i in 0..o.dim() {
                assert!((next.v[i] - vb * phi[i]).abs() < 1e-10 * (1.0 + phi[i].abs()));
                assert!((next.eta[i] - eb * phi[i]).abs() < 1e-10 * (1.0 + phi[i].abs()));
            }
        }
    }

    #[test]
    fn substep_satisfies_energy_equality() {
        let o = op(12, 0.3);
        let state = smooth_state(&o.space);
        let (dt, eps) = (0.02, 0.05);
        let next = structure_substep(&state, &o, dt, eps).unwrap();
        let dv: Vec<f64> = next.v.iter().zip(&state.v).map(|(a, b)| a - b).collect();
        let de: Vec<f64> = next.eta.iter().zip(&state.eta).map(|(a, b)| a - b).collect();
        let (k0, e0) = structure_energy(&state, &o);
        let (k1, e1) = structure_energy(&next, &o);
        let c1 = 0.5 * o.l2_norm_sq(&dv) + 0.5 * o.energy_norm_sq(&de);
        let d1 = eps * dt * o.curvature_norm_sq(&next.v);
        let lhs = k1 + e1 + d1 + c1;
        assert!((lhs - (k0 + e0)).abs() < 1e-12 * (k0 + e0).max(1.0));
        for i in 0..o.dim() {
            assert_eq!(next.eta[i], state.eta[i] + dt * next.v[i]);
        }
    }

    #[test]
    fn energy_quadratic_scaling() {
        let o = op(6, 0.0);
        let mut s = smooth_state(&o.space);
        let (k, _) = structure_energy(&s, &o);
        s.v.iter_mut().for_each(|x| *x *= 2.0);
        let (k2, _) = structure_energy(&s, &o);
        assert!((k2 - 4.0 * k).abs() < 1e-14 * k2);
        assert_eq!(structure_energy(&StructureState::zeros(o.dim()), &o), (0.0, 0.0));
    }

    #[test]
    fn cached_factorization_is_refreshed_on_new_dt() {
        let o = op(6, 0.0);
        let mut solver = StructureSolver::new(o.clone());
        let s = smooth_state(&o.space);
        let a = solver.substep(&s, 0.1, 0.0).unwrap();
        let b = solver.substep(&s, 0.05, 0.0).unwrap();
        let fresh = structure_substep(&s, &o, 0.05, 0.0).unwrap();
        assert_ne!(a, b);
        assert_eq!(b, fresh);
    }
}
