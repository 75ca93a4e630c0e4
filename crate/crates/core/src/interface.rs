//! Eigenbasis of the discrete Dirichlet Laplacian on the interface Γ.
//!
//! The piecewise-linear stiffness and mass matrices on a uniform grid are
//! both Toeplitz tridiagonal, so the generalized eigenvectors are discrete
//! sines. Weighted norms `(Σ (1+γ_k)^p |v̂_k|²)^{1/2}` built on this basis
//! stand in for the fractional Sobolev norms `H^p(Γ)`.

use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct InterfaceBasis {
    length: f64,
    cells: usize,
    eigenvalues: Vec<f64>,
    /// Mass-orthonormal modes on the interior nodes `1..cells`.
    modes: Vec<Vec<f64>>,
}

impl InterfaceBasis {
    pub fn new(length: f64, cells: usize) -> Self {
        assert!(cells >= 2);
        let h = length / cells as f64;
        let m = cells - 1;
        let mut eigenvalues = Vec::with_capacity(m);
        let mut modes = Vec::with_capacity(m);
        for k in 1..=m {
            let theta = k as f64 * PI / cells as f64;
            let mass_eig = h / 6.0 * (4.0 + 2.0 * theta.cos());
            let stiff_eig = (2.0 - 2.0 * theta.cos()) / h;
            eigenvalues.push(stiff_eig / mass_eig);
            let scale = (mass_eig * cells as f64 / 2.0).sqrt();
            modes.push((1..=m).map(|j| (theta * j as f64).sin() / scale).collect());
        }
        Self { length, cells, eigenvalues, modes }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Mode `k` (zero-based) on all `cells + 1` interface nodes, ends included.
    pub fn mode_nodal(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cells + 1];
        out[1..self.cells].copy_from_slice(&self.modes[k]);
        out
    }

    /// P1 mass matrix applied to nodal values (`cells + 1` entries, ends ignored).
    fn mass_apply(&self, nodal: &[f64]) -> Vec<f64> {
        assert_eq!(nodal.len(), self.cells + 1);
        let h = self.length / self.cells as f64;
        (1..self.cells)
            .map(|j| {
                let left = if j > 1 { nodal[j - 1] } else { 0.0 };
                let right = if j + 1 < self.cells { nodal[j + 1] } else { 0.0 };
                h / 6.0 * (left + 4.0 * nodal[j] + right)
            })
            .collect()
    }

    /// Coefficients `v̂_k = φ_kᵀ M v` of nodal data vanishing at both ends.
    pub fn coefficients(&self, nodal: &[f64]) -> Vec<f64> {
        let mv = self.mass_apply(nodal);
        self.modes
            .iter()
            .map(|phi| phi.iter().zip(&mv).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn weighted_norm_sq(&self, nodal: &[f64], exponent: f64) -> f64 {
        self.coefficients(nodal)
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, g)| (1.0 + g).powf(exponent) * c * c)
            .sum()
    }

    /// Discrete `H^exponent(Γ)` proxy norm of scalar nodal data.
    pub fn weighted_norm(&self, nodal: &[f64], exponent: f64) -> f64 {
        self.weighted_norm_sq(nodal, exponent).sqrt()
    }

    /// Same norm for a 2-vector field, summing both components.
    pub fn weighted_norm_vec(&self, nodal: &[[f64; 2]], exponent: f64) -> f64 {
        let zc: Vec<f64> = nodal.iter().map(|v| v[0]).collect();
        let rc: Vec<f64> = nodal.iter().map(|v| v[1]).collect();
        (self.weighted_norm_sq(&zc, exponent) + self.weighted_norm_sq(&rc, exponent)).sqrt()
    }
}
