//! Lie-splitting solver for stochastic fluid-structure interaction in a
//! compliant cylinder, with discrete energy-budget diagnostics.

pub mod diagnostics;
pub mod error;
pub mod fluid;
pub mod geometry;
pub mod interface;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod noise;
pub mod quadrature;
pub mod scheme;
pub mod structure;

pub use error::{Error, Result};
pub use geometry::{
    ale_velocity, harmonic_extension, harmonic_extension_scalar_bound_check,
    jacobian_identity_residual, piola_transform, transformed_gradient, AleMap, EdgeGeometry,
    GeometryBounds, HarmonicExtender, QuadField, TransformedGradient,
};
pub use interface::InterfaceBasis;
pub use mesh::{BoundaryPart, ReferenceMesh};
pub use diagnostics::{
    compare_refinement, ensemble_stats, ledger_step, penalty_scaling_report, time_shift_modulus,
    verify_fluid_budget, verify_ledger, verify_structure_identity, EnsembleStats, Estimate, LedgerRow,
    PenaltyTable, RefinementRatios, VerificationReport,
};
pub use fluid::{
    fluid_energy_identity_residual, fluid_substep, DivQuadrature, FluidBudget, FluidOutput, FluidParams, FluidSolver, FluidState,
    FluidStepInputs, PicardReport, SlipProjection, Terms,
};
pub use io::{RunConfig, SnapshotFile, SweepGrid};
pub use noise::{apply_g, sample_increment, NoiseCoefficient, NoiseConfig, NoiseForce, WienerProcess};
pub use scheme::{
    build_interpolants, compute_cutoff, detect_stopping_time, run_path, update_artificial, InitialConfig,
    Interpolants, PressureConfig, Scheme, SchemeConfig, TrajectoryRecord,
};
pub use structure::{
    assemble_elastic, structure_energy, structure_substep, ElasticOperator, ElasticParams, HermiteSpace,
    StructureSolver, StructureState,
};
