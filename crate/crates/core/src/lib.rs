//! Simulation and analysis of degenerate competing three-particle systems.
//!
//! Three ranked particles move with rank-based drifts; only some ranks carry
//! Brownian noise. The gaps between neighbours are obtained by a coupled
//! Skorokhod reflection, and for the systems with a middle noiseless particle
//! or two noiseless outer particles the individual names are recovered from the
//! ranks by an approximate excursion unfolding.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`. Ensemble statistics in
//! [`stats`] work in `f64` only.

pub mod analysis;
pub mod error;
pub mod model;
pub mod scalar;
pub mod skorokhod;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
pub use model::{
    lambda_by_inversion, lambda_closed_form, reflection_spec, stationarity_check, DriftSpec, Field,
    InitialPositions, LocalTimeSplit, ReflectionSpec, SamplePath, SimConfig, Stationarity, SystemKind,
    TimeGrid,
};
pub use scalar::Real;
pub use skorokhod::{
    local_time_identification_check, reflect_1d, solve_coupled_regulators, CoupledSolution, GapPair,
    IdentificationReport, RegulatorPair, RegulatorStepper,
};
pub use systems::{
    coin_rng, detect_collisions, path_rng, sample_brownian, simulate_ranks, unfold_names,
    verify_recovered_brownians, CollisionReport, NameTriple, Permutation, RankStream, RankTriple,
    Transposition, Unfolder,
};

pub type DriftSpecF64 = DriftSpec<f64>;
pub type InitialPositionsF64 = InitialPositions<f64>;
pub type ReflectionSpecF64 = ReflectionSpec<f64>;
pub type TimeGridF64 = TimeGrid<f64>;
pub type SamplePathF64 = SamplePath<f64>;
pub type SimConfigF64 = SimConfig<f64>;
pub type RankTripleF64 = RankTriple<f64>;
pub type NameTripleF64 = NameTriple<f64>;
pub type RankStreamF64 = RankStream<f64>;
pub type CollisionReportF64 = CollisionReport<f64>;
pub type RegulatorPairF64 = RegulatorPair<f64>;
pub type GapPairF64 = GapPair<f64>;
