//! Benchmark fixtures.

use stochfsi_core::{AleMap, InitialConfig, PressureConfig, Scheme, SchemeConfig, StructureState};

/// A noisy, pressure-driven configuration on an `n × n` mesh.
pub fn config(n: usize, steps: usize) -> SchemeConfig {
    let mut c = SchemeConfig::new(0.01 * steps as f64, steps, 1e-2);
    c.nz = n;
    c.nr = n;
    c.initial = InitialConfig {
        displacement: 0.02,
        velocity: 0.0,
        axial_velocity: 0.2,
    };
    c.pressure = PressureConfig {
        inlet: 0.0,
        outlet: 0.0,
        pulse_amplitude: 2.0,
        pulse_duration: 0.05,
    };
    c
}

/// Everything one fluid substep needs, built from the initial data.
pub struct FluidFixture {
    pub scheme: Scheme,
    pub u: Vec<[f64; 2]>,
    pub v: Vec<f64>,
    pub map: AleMap,
    pub zero_u: Vec<[f64; 2]>,
    pub zero_v: Vec<f64>,
}

impl FluidFixture {
    pub fn new(n: usize) -> Self {
        let scheme = Scheme::new(config(n, 4)).expect("bench config is valid");
        let (u, s) = scheme.initial_state();
        let (u, s): (Vec<[f64; 2]>, StructureState) = (u.to_vec(), s.clone());
        let map = scheme.map_of(&s.eta).expect("initial map");
        let zero_u = vec![[0.0; 2]; u.len()];
        let zero_v = vec![0.0; s.v.len()];
        Self {
            scheme,
            u,
            v: s.v,
            map,
            zero_u,
            zero_v,
        }
    }
}
