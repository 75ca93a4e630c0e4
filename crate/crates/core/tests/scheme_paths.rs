use stochfsi_core::diagnostics::{energy_series, fluid_identity_holds, structure_identity_holds};
use stochfsi_core::io::run_ensemble;
use stochfsi_core::quadrature::{on_interval, GAUSS4};
use stochfsi_core::*;

fn config(steps: usize, final_time: f64, n: usize) -> SchemeConfig {
    let mut c = SchemeConfig::new(final_time, steps, 1e-2);
    c.nz = n;
    c.nr = n;
    c.noise.enabled = false;
    c.initial = InitialConfig {
        displacement: 0.0,
        velocity: 0.0,
        axial_velocity: 0.0,
    };
    c.pressure = PressureConfig {
        inlet: 0.0,
        outlet: 0.0,
        pulse_amplitude: 2.0,
        pulse_duration: 0.1,
    };
    c
}

fn diff_sq(mesh: &ReferenceMesh, a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let d: Vec<[f64; 2]> = a.iter().zip(b).map(|(x, y)| [x[0] - y[0], x[1] - y[1]]).collect();
    mesh.weighted_l2_sq(&d, None)
}

/// `∫_0^T ‖ũ_a - ũ_b‖²` with Gauss quadrature on the finer grid.
fn l2_time_distance(a: &TrajectoryRecord, b: &TrajectoryRecord) -> f64 {
    let (ia, ib) = (build_interpolants(a), build_interpolants(b));
    let fine = if a.dt < b.dt { a } else { b };
    (0..fine.ledger.len())
        .map(|n| {
            on_interval(&GAUSS4, fine.time(n), fine.time(n + 1))
                .map(|(t, w)| w * diff_sq(&fine.mesh, &ia.u_tilde(t), &ib.u_tilde(t)))
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn pressure_pulse_self_convergence_is_first_order() {
    let recs: Vec<TrajectoryRecord> =
        [10, 20, 40].iter().map(|&n| run_path(&config(n, 0.2, 6), 0).unwrap()).collect();
    let e1 = l2_time_distance(&recs[0], &recs[1]).sqrt();
    let e2 = l2_time_distance(&recs[1], &recs[2]).sqrt();
    let rate = e1 / e2;
    assert!(e1 > 0.0);
    assert!((1.6..2.6).contains(&rate), "self-convergence ratio {rate} ({e1:.3e}, {e2:.3e})");
}

#[test]
fn constant_minus_linear_interpolant_integral() {
    let mut c = config(6, 0.06, 4);
    c.noise.enabled = true;
    c.initial.axial_velocity = 0.3;
    let rec = run_path(&c, 5).unwrap();
    let it = build_interpolants(&rec);
    let mesh = rec.mesh;
    let mut quad = 0.0;
    let mut closed = 0.0;
    for n in 0..rec.ledger.len() {
        quad += on_interval(&GAUSS4, rec.time(n), rec.time(n + 1))
            .map(|(t, w)| w * diff_sq(&mesh, &it.u(t), &it.u_tilde(t)))
            .sum::<f64>();
        closed += diff_sq(&mesh, &rec.u[n + 1], &rec.u[n]) * rec.dt / 3.0;
    }
    assert!((quad - closed).abs() <= 1e-12 * closed.max(1e-300), "{quad} vs {closed}");
    assert_eq!(it.u_tilde(rec.time(2)), rec.u[2]);
}

#[test]
fn time_shift_modulus_behaviour() {
    let rec = run_path(&config(16, 0.16, 4), 0).unwrap();
    assert_eq!(time_shift_modulus(&rec, 0.0, 0.25).unwrap(), (0.0, 0.0));
    let (u4, v4) = time_shift_modulus(&rec, 4.0 * rec.dt, 0.25).unwrap();
    let (u2, v2) = time_shift_modulus(&rec, 2.0 * rec.dt, 0.25).unwrap();
    assert!(u2 < u4 && v2 < v4, "({u2}, {v2}) vs ({u4}, {v4})");
    assert!(time_shift_modulus(&rec, 0.3 * rec.dt, 0.25).is_err());

    let mut still = config(8, 0.08, 4);
    still.pressure = PressureConfig::default();
    let frozen = run_path(&still, 0).unwrap();
    assert_eq!(time_shift_modulus(&frozen, 2.0 * frozen.dt, 0.25).unwrap(), (0.0, 0.0));
}

#[test]
fn zero_forcing_ensemble_max_energy_is_initial_energy() {
    let mut c = config(6, 0.06, 4);
    c.pressure = PressureConfig::default();
    c.initial = InitialConfig {
        displacement: 0.02,
        velocity: 0.1,
        axial_velocity: 0.4,
    };
    let scheme = Scheme::new(c).unwrap();
    let recs: Vec<TrajectoryRecord> = run_ensemble(&scheme, &[1, 2, 3]).into_iter().map(Result::unwrap).collect();
    let s = ensemble_stats(&recs).unwrap();
    let e0 = recs[0].ledger[0].energy;
    assert_eq!(s.max_energy.mean, e0);
    assert_eq!(s.max_energy.half_width, 0.0);
    for r in &recs {
        let e = energy_series(r);
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn half_width_shrinks_with_more_paths() {
    let mut c = config(4, 0.04, 4);
    c.noise.enabled = true;
    c.noise.gain = 1.0;
    c.initial.axial_velocity = 0.5;
    let scheme = Scheme::new(c).unwrap();
    let seeds: Vec<u64> = (0..256).collect();
    let recs: Vec<TrajectoryRecord> = run_ensemble(&scheme, &seeds).into_iter().map(Result::unwrap).collect();
    let small = ensemble_stats(&recs[..64]).unwrap();
    let large = ensemble_stats(&recs).unwrap();
    let ratio = small.dissipation.half_width / large.dissipation.half_width;
    assert!((1.5..2.7).contains(&ratio), "half-width ratio {ratio}");
    assert!(large.warning.is_none());
    assert!(ensemble_stats(&recs[..1]).unwrap().warning.is_some());
}

#[test]
fn pressure_work_is_boundary_flux() {
    let rec = run_path(&config(5, 0.05, 4), 0).unwrap();
    let c = config(5, 0.05, 4);
    let mesh = rec.mesh;
    let hr = mesh.hr();
    let flux = |u: &[[f64; 2]], j: usize| -> f64 {
        (0..=mesh.nr)
            .map(|i| {
                let w = if i == 0 || i == mesh.nr { 0.5 * hr } else { hr };
                w * u[mesh.node_id(j, i)][0]
            })
            .sum()
    };
    for (n, row) in rec.ledger.iter().enumerate() {
        let (pin, pout) = c.pressure.average(rec.time(n), rec.time(n + 1));
        let u = &rec.u[n + 1];
        let expect = rec.dt * (pin * flux(u, 0) - pout * flux(u, mesh.nz));
        assert!((row.pressure_work - expect).abs() <= 1e-13 * (1.0 + expect.abs()), "step {n}");
    }
}

#[test]
fn subdivided_steps_keep_the_ledger_balanced() {
    let mut c = config(4, 0.2, 4);
    c.initial.axial_velocity = 8.0;
    c.pressure.pulse_amplitude = 0.0;
    c.nu = 0.05;
    c.max_picard = 12;
    c.max_halvings = 4;
    let rec = run_path(&c, 0).unwrap();
    assert!(rec.is_complete(), "{:?}", rec.failure);
    assert!(rec.ledger.iter().any(|r| r.halvings > 0), "no subdivided step");
    for r in &rec.ledger {
        assert!(structure_identity_holds(r));
        assert!(fluid_identity_holds(r, c.picard_tol), "step {}", r.step);
    }
    let replayed = Scheme::new(c).unwrap().replay(&rec).unwrap();
    for (row, rep) in rec.ledger.iter().zip(&replayed) {
        assert_eq!(rep.is_none(), row.halvings > 0);
    }
}

#[test]
fn exhausted_retries_truncate_the_path() {
    let mut c = config(4, 0.2, 4);
    c.initial.axial_velocity = 8.0;
    c.nu = 0.05;
    c.max_picard = 1;
    c.max_halvings = 0;
    let rec = run_path(&c, 0).unwrap();
    assert!(rec.failure.is_some());
    assert!(rec.ledger.len() < 4);
    assert_eq!(rec.u.len(), rec.ledger.len() + 1);
    assert!(!rec.is_complete());
}
