//! INS/DVL navigation fusion with process/measurement noise cross-correlation.
//!
//! * [`dvl`]: beam geometry, least-squares velocity, beam corruption.
//! * [`ins`]: strapdown mechanization.
//! * [`ekf`]: 12-state error-state EKF with a cross-covariance aware update.
//! * [`beamsnet`]: 1D-CNN beam-to-velocity regressor with a hand-written trainer.
//! * [`sim`]: trajectories, noisy sensor streams and planted noise correlation.
//! * [`metrics`]: error statistics, NEES bands and covariance summaries.
//! * [`experiments`]: corpus generation and filter-versus-filter runs.

pub mod beamsnet;
pub mod dvl;
pub mod ekf;
pub mod experiments;
pub mod ins;
pub mod metrics;
pub mod rng;
pub mod sim;
