//! Entropic optimal transport between finitely supported measures, with the
//! sampling theory of its potentials, costs and divergences.

pub mod error;
pub mod inference;
pub mod measures;
pub mod montecarlo;
pub mod operators;
pub mod sinkhorn;
pub mod stats;

pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, EmpiricalMeasure, MeasureFormat, SampleBatch};
pub use operators::{build_operators, operator_spectrum, resolvent_solve, KernelOperators, Side, SpectrumKind};
pub use sinkhorn::{sinkhorn_divergence, solve, Divergence, SinkhornSolution, SolverOptions};
pub use inference::{
    divergence_h1_variance, eta_marginals, functional_ci, functional_variance, h0_limit_sample, h0_limit_spectrum,
    potential_covariance, FunctionalSpec, H0Spectrum, H0TestReport, InferenceReport, PotentialCovariance,
    SamplingDesign,
};
pub use montecarlo::{run_replications, ReplicationReport, SimulationConfig, Statistic};
