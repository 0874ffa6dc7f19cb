//! # fdm-smoother
//!
//! Reconstruction of aircraft landing trajectories from routinely
//! recorded flight data. The toolkit runs an extended-Kalman-filter
//! forward pass and a Rauch-Tung-Striebel backward pass over a physical
//! landing model, estimates time-varying measurement-noise covariance
//! matrices from the residuals of a first pass by Gaussian-kernel
//! smoothing, reruns the smoother with those matrices under several
//! correlation limits, selects the best run via the Smoothing Quality
//! Measure, and checks the residual assumptions with kernel-density and
//! copula-style dependence diagnostics.
//!
//! ## Modules
//!
//! - [`timeseries`]: CSV-backed signal tables, resampling, landing-window
//!   extraction.
//! - [`statespace`]: model trait, RK4 propagation, linearization,
//!   covariance schedules.
//! - [`smoother`]: EKF forward pass and RTS backward pass.
//! - [`noise`]: kernel-weighted moving mean/covariance estimation and
//!   correlation limiting.
//! - [`sqm`]: smoothing quality measure and run selection.
//! - [`flight`]: the 27-state landing model with ILS deviation outputs.
//! - [`simulate`]: synthetic landings with exactly known noise.
//! - [`diagnostics`]: standardized residuals, KDE, normalized contours.
//! - [`pipeline`]: the two-iteration reconstruction pipeline behind the
//!   `fdms` command-line tool.

pub mod diagnostics;
pub mod error;
pub mod flight;
pub mod noise;
pub mod pipeline;
pub mod simulate;
pub mod smoother;
pub mod sqm;
pub mod statespace;
pub mod timeseries;

pub use error::{Error, Result};
pub use flight::{FlightModel, RunwayGeometry, ThetaParams};
pub use noise::{
    apply_correlation_limit, estimate_covariance, estimate_mean, kernel_weights, EstimatedSchedule,
    KernelConfig, ResidualSeries,
};
pub use simulate::{simulate_flight, simulate_lti, Scenario};
pub use smoother::{backward_pass, forward_pass, FilterPass, SignalMap, SmootherResult};
pub use sqm::{compute_sqm, select_best, SqmReport};
pub use statespace::{
    jacobian_state, propagate, CovarianceSchedule, JacobianOf, LinearModel, NoiseModel,
    StateSpaceModel,
};
pub use timeseries::{
    extract_landing_window, load_table, resample, save_table, FlightWindow, SignalSpec,
    TimeSeriesTable,
};
