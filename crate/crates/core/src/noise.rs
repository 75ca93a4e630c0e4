//! Truncated Wiener process and the multiplicative noise coefficient.
//!
//! Increments are drawn from counter-based streams keyed by
//! `(seed, step, mode)`, so a path is reproducible no matter how paths
//! are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HarmonicExtender;
use crate::structure::ElasticOperator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Number of retained modes `K`.
    pub modes: usize,
    /// Spectrum `q_k = k^{-decay}`.
    pub decay: f64,
    /// Overall gain in `(0, 1]`; the growth bound holds with constant `gain`.
    pub gain: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            modes: 4,
            decay: 2.0,
            gain: 0.5,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Config("noise.modes must be at least 1".into()));
        }
        if !(self.decay > 1.0) {
            return Err(Error::Config(format!(
                "noise.decay must exceed 1 for a trace-class covariance, got {}",
                self.decay
            )));
        }
        if !(self.gain >= 0.0 && self.gain <= 1.0) {
            return Err(Error::Config(format!("noise.gain must lie in [0, 1], got {}", self.gain)));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard normal draw for a stream key.
pub fn keyed_normal(seed: u64, step: u64, mode: u64, salt: u64) -> f64 {
    let key = splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ mode) ^ salt);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    StandardNormal.sample(&mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WienerProcess {
    q: Vec<f64>,
    seed: u64,
    counter: u64,
}

impl WienerProcess {
    pub fn new(config: &NoiseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let q = (1..=config.modes).map(|k| (k as f64).powf(-config.decay)).collect();
        Ok(Self { q, seed, counter: 0 })
    }

    pub fn with_spectrum(q: Vec<f64>, seed: u64) -> Result<Self> {
        if q.is_empty() || q.iter().any(|&x| !(x > 0.0)) || q.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("spectrum must be positive and nonincreasing".into()));
        }
        Ok(Self { q, seed, counter: 0 })
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.q
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Increment for an explicit step index; does not touch the counter.
    pub fn increment_at(&self, step: u64, dt: f64) -> Vec<f64> {
        self.q
            .iter()
            .enumerate()
            .map(|(k, &q)| (q * dt).sqrt() * keyed_normal(self.seed, step, k as u64, 0))
            .collect()
    }

    /// Splits an increment over `[t, t + dt]` into its two halves with a
    /// Brownian bridge. `salt` distinguishes nested splits of one step.
    pub fn bridge_split(&self, step: u64, salt: u64, dt: f64, total: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut first = Vec::with_capacity(total.len());
        let mut second = Vec::with_capacity(total.len());
        for (k, (&q, &dw)) in self.q.iter().zip(total).enumerate() {
            let z = keyed_normal(self.seed, step, k as u64, salt.wrapping_add(1));
            let half = 0.5 * dw + 0.5 * (q * dt).sqrt() * z;
            first.push(half);
            second.push(dw - half);
        }
        (first, second)
    }
}

/// Draws the next increment and advances the stream counter.
pub fn sample_increment(w: &mut WienerProcess, dt: f64) -> Vec<f64> {
    let out = w.increment_at(w.counter, dt);
    w.counter += 1;
    out
}

/// `G(u, η) e_k = a_k(u, η) m_k` with fixed unit modes `m_k` and
/// amplitudes `a_k = c_k (‖u‖_{L²} + ρ‖η‖_{L²})`.
#[derive(Clone, Debug)]
pub struct NoiseCoefficient {
    pub fluid_modes: Vec<Vec<[f64; 2]>>,
    pub structure_modes: Vec<Vec<f64>>,
    /// `c_k`, with `Σ q_k c_k² = gain²`.
    pub weights: Vec<f64>,
    pub q: Vec<f64>,
    /// `ρ = min(1, √λ_min)` so that `ρ‖η‖_{L²} ≤ ‖η‖_{H²_0}`.
    pub rho: f64,
    mesh: crate::mesh::ReferenceMesh,
    structure_mass: crate::linalg::BandMatrix,
}

/// The two components of `G(u, η) ΔW`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseForce {
    pub fluid: Vec<[f64; 2]>,
    pub structure: Vec<f64>,
}

impl NoiseCoefficient {
    /// Radial interface sines `sin(kπz/L)` on the beam and their harmonic
    /// extensions in the fluid, normalized to unit `L²(O) × L²(0, L)` norm.
    pub fn new(
        extender: &HarmonicExtender,
        op: &ElasticOperator,
        process: &WienerProcess,
        gain: f64,
    ) -> Result<Self> {
        let mesh = *extender.mesh();
        let space = op.space;
        if space.elements != mesh.nz {
            return Err(Error::MeshMismatch("beam and fluid mesh must share the axial grid".into()));
        }
        let l = mesh.length;
        let mut fluid_modes = Vec::new();
        let mut structure_modes = Vec::new();
        for k in 1..=process.spectrum().len() {
            let f = k as f64 * std::f64::consts::PI / l;
            let s = space.interpolate(|x| ([0.0, (f * x).sin()], [0.0, f * (f * x).cos()]));
            let top: Vec<f64> = (0..=mesh.nz)
                .map(|j| if j == 0 || j == mesh.nz { 0.0 } else { (f * j as f64 * mesh.hz()).sin() })
                .collect();
            let ext = extender.extend_scalar(&top)?;
            let fl: Vec<[f64; 2]> = ext.iter().map(|&x| [0.0, x]).collect();
            let norm = (mesh.weighted_l2_sq(&fl, None) + op.l2_norm_sq(&s)).sqrt();
            fluid_modes.push(fl.iter().map(|v| [v[0] / norm, v[1] / norm]).collect());
            structure_modes.push(s.iter().map(|x| x / norm).collect());
        }
        let trace = process.trace();
        let weights = vec![gain / trace.sqrt(); process.spectrum().len()];
        let rho = op.min_generalized_eigenvalue().sqrt().min(1.0);
        Ok(Self {
            fluid_modes,
            structure_modes,
            weights,
            q: process.spectrum().to_vec(),
            rho,
            mesh,
            structure_mass: op.mass.clone(),
        })
    }

    pub fn num_modes(&self) -> usize {
        self.weights.len()
    }

    /// `‖u‖_{L²(O)} + ρ‖η‖_{L²(0,L)}`.
    pub fn state_scale(&self, u: &[[f64; 2]], eta: &[f64]) -> f64 {
        self.mesh.l2_norm(u) + self.rho * self.structure_mass.bilinear(eta, eta).max(0.0).sqrt()
    }

    pub fn amplitudes(&self, u: &[[f64; 2]], eta: &[f64]) -> Vec<f64> {
        let s = self.state_scale(u, eta);
        self.weights.iter().map(|c| c * s).collect()
    }

    fn mode_norm_sq(&self, k: usize) -> f64 {
        self.mesh.weighted_l2_sq(&self.fluid_modes[k], None)
            + self.structure_mass.bilinear(&self.structure_modes[k], &self.structure_modes[k])
    }

    /// Hilbert-Schmidt norm `‖G(u, η)‖_{L₂(U₀; L²)}` by direct mode summation.
    pub fn hs_norm(&self, u: &[[f64; 2]], eta: &[f64]) -> f64 {
        self.amplitudes(u, eta)
            .iter()
            .enumerate()
            .map(|(k, a)| self.q[k] * a * a * self.mode_norm_sq(k))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖G(u₁, η₁) - G(u₂, η₂)‖_{L₂(U₀; L²)}`.
    pub fn hs_distance(&self, a: (&[[f64; 2]], &[f64]), b: (&[[f64; 2]], &[f64])) -> f64 {
        let (a1, a2) = (self.amplitudes(a.0, a.1), self.amplitudes(b.0, b.1));
        (0..self.num_modes())
            .map(|k| self.q[k] * (a1[k] - a2[k]).powi(2) * self.mode_norm_sq(k))
            .sum::<f64>()
            .sqrt()
    }
}

/// `Σ_k ΔW_k a_k(u, η) m_k`.
pub fn apply_g(g: &NoiseCoefficient, u: &[[f64; 2]], eta: &[f64], dw: &[f64]) -> Result<NoiseForce> {
    if dw.len() != g.num_modes() {
        return Err(Error::InvalidInput(format!(
            "increment has {} modes, coefficient has {}",
            dw.len(),
            g.num_modes()
        )));
    }
    let amps = g.amplitudes(u, eta);
    let mut fluid = vec![[0.0; 2]; g.fluid_modes[0].len()];
    let mut structure = vec![0.0; g.structure_modes[0].len()];
    for k in 0..g.num_modes() {
        let c = dw[k] * amps[k];
        if c == 0.0 {
            continue;
        }
        for (f, m) in fluid.iter_mut().zip(&g.fluid_modes[k]) {
            f[0] += c * m[0];
            f[1] += c * m[1];
        }
        for (s, m) in structure.iter_mut().zip(&g.structure_modes[k]) {
            *s += c * m;
        }
    }
    Ok(NoiseForce { fluid, structure })
}
