//! Driven-emitter simulation: Lindblad dynamics of two-level and V-type
//! emitters under pulsed drive, photon correlations and the inference tools
//! used to compare them with measured data.

pub mod correlation;
pub mod drive;
pub mod emitter;
pub mod error;
pub mod inference;
pub mod integrator;
pub mod jumps;
pub mod linalg;
pub mod scenario;
pub mod state;

pub use correlation::{
    continuous_g2_center, convolve_irf, cw_correlation, cw_g2_analytic, normalize_histogram, normalize_pulsed,
    pulsed_correlation, two_time_correlation, CorrelationOptions, CorrelationRecord, HistogramData, PeakTable,
};
pub use drive::{envelope_at, pulse_spectrum, DriveEnvelope, PulseShape, PulseSpectrum};
pub use emitter::{master_rhs, EmitterKind, EmitterModel};
pub use error::{Error, Result};
pub use jumps::{jump_oracle, JumpEstimate};
pub use integrator::{convergence_order, evolve, ConvergenceReport, Trajectory};
pub use scenario::{resolve_threads, RunOptions, RunReport, Scenario, ScenarioError, ScenarioKind};
pub use state::DensityMatrix;
pub use inference::{
    beat_frequency, efficiency_report, fit_exponential, fit_rabi, tpi_visibility, BeatResult, EfficiencyChain,
    EfficiencyReport, FitOptions, FitResult, Measured, Visibility,
};
