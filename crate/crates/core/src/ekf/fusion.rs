use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    build_error_dynamics, interval_cross_cov, idx, inject_and_reset, limit_cross_cov, predict, update_correlated,
    velocity_observation, CrossCovSupport, CrossCovariance, EkfError, ErrorState, ErrorStateModel,
    NoiseModel, StateMatrix, StateVector,
};
use crate::ins::{ImuSample, NavState, Strapdown, STANDARD_GRAVITY};

/// Where a velocity measurement came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementSource {
    LeastSquares,
    BeamsNet,
    /// BeamsNet requested but still warming up; least squares used instead.
    Fallback,
    /// Synthetic velocity with a prescribed error model.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementFrame {
    /// Rotated to the navigation frame with the current attitude estimate.
    Body,
    Navigation,
}

/// Velocity measurement with its covariance, both expressed in `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityMeasurement {
    pub time: f64,
    pub velocity: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub frame: MeasurementFrame,
    pub source: MeasurementSource,
}

impl VelocityMeasurement {
    pub fn body(time: f64, velocity: Vector3<f64>, covariance: Matrix3<f64>, source: MeasurementSource) -> Self {
        Self {
            time,
            velocity,
            covariance,
            frame: MeasurementFrame::Body,
            source,
        }
    }
}

/// One-sigma initial uncertainty of the error state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialUncertainty {
    pub velocity: f64,
    pub tilt: f64,
    pub heading: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self {
            velocity: 0.05,
            tilt: 0.005,
            heading: 0.02,
            accel_bias: 0.01,
            gyro_bias: 5e-4,
        }
    }
}

impl InitialUncertainty {
    pub fn sigmas(&self) -> StateVector {
        let mut s = StateVector::zeros();
        for i in 0..3 {
            s[idx::VEL + i] = self.velocity;
            s[idx::ACC_BIAS + i] = self.accel_bias;
            s[idx::GYR_BIAS + i] = self.gyro_bias;
        }
        s[idx::ATT] = self.tilt;
        s[idx::ATT + 1] = self.tilt;
        s[idx::ATT + 2] = self.heading;
        s
    }

    pub fn covariance(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&self.sigmas().map(|s| s * s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub use_cross_correlation: bool,
    pub support: CrossCovSupport,
    /// Scale `M` down at updates where it is not a feasible cross-covariance
    /// for the current prior. When unset such updates fail with
    /// `EkfError::Inconsistent`.
    pub limit_cross_cov: bool,
    pub initial: InitialUncertainty,
    pub gravity: f64,
    /// Maximum distance between a measurement time and the IMU sample it is
    /// attached to, seconds.
    pub time_tolerance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            use_cross_correlation: true,
            support: CrossCovSupport::NavNoise,
            limit_cross_cov: true,
            initial: InitialUncertainty::default(),
            gravity: STANDARD_GRAVITY,
            time_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Aware,
    Neglect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTag {
    pub mode: RunMode,
    pub rho: f64,
    pub seed: u64,
}

/// State of the filter after one IMU step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub time: f64,
    /// Correction applied at this step; zero between measurements.
    pub x: StateVector,
    pub p_diag: StateVector,
    /// `measured - INS` velocity in the navigation frame; zero between
    /// measurements.
    pub innovation: Vector3<f64>,
    pub nav: NavState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    /// Row index in `FilterRun::rows`.
    pub row: usize,
    pub time: f64,
    pub innovation: Vector3<f64>,
    pub gain_norm: f64,
    pub source: MeasurementSource,
    /// Cross-covariance used, after any scaling.
    pub cross_cov: CrossCovariance,
    /// Factor applied to the nominal cross-covariance; 1 when unscaled.
    pub cross_cov_scale: f64,
    /// Posterior covariance.
    pub covariance: StateMatrix,
    /// Navigation state after injection.
    pub nav: NavState,
}

/// Output of one filter configuration over one log.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub tag: RunTag,
    /// Row 0 is the initial state; row `i` follows IMU sample `i - 1`.
    pub rows: Vec<RunRow>,
    pub updates: Vec<UpdateRecord>,
    /// Slightly negative covariance diagonals clamped to zero.
    pub psd_clamps: usize,
    /// Updates whose cross-covariance had to be scaled down.
    pub cross_cov_limited: usize,
}

impl FilterRun {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time).collect()
    }

    pub fn final_nav(&self) -> NavState {
        self.rows.last().expect("run has an initial row").nav
    }
}

/// Runs the error-state filter over an IMU log with velocity updates.
///
/// Prediction happens at every IMU sample. A measurement is applied right
/// after the IMU sample carrying the same timestamp. When
/// `use_cross_correlation` is set, the measurement error is taken to be
/// correlated with the IMU white noise summed since the previous update, and
/// `M` is that correlation mapped through the interval's error dynamics;
/// otherwise `M = 0`.
pub fn fuse_run(
    imu: &[ImuSample],
    measurements: &[VelocityMeasurement],
    initial: NavState,
    noise: &NoiseModel,
    config: &FilterConfig,
    seed: u64,
) -> Result<FilterRun, EkfError> {
    noise.validate()?;
    for (i, w) in measurements.windows(2).enumerate() {
        if !(w[1].time > w[0].time) {
            return Err(EkfError::NonMonotoneTime {
                index: i + 1,
                time: w[1].time,
            });
        }
    }
    let ins = Strapdown::new(config.gravity);
    let h = velocity_observation();
    let q_step = noise.process_covariance();
    let tag = RunTag {
        mode: if config.use_cross_correlation {
            RunMode::Aware
        } else {
            RunMode::Neglect
        },
        rho: noise.rho,
        seed,
    };

    let mut state = initial;
    let mut err = ErrorState::new(config.initial.covariance());
    let mut gamma = StateMatrix::zeros();
    let mut steps = 0usize;
    let mut rows = Vec::with_capacity(imu.len() + 1);
    let mut updates = Vec::with_capacity(measurements.len());
    let mut psd_clamps = 0;
    let mut cross_cov_limited = 0;
    rows.push(RunRow {
        time: state.time,
        x: StateVector::zeros(),
        p_diag: err.p.diagonal(),
        innovation: Vector3::zeros(),
        nav: state,
    });

    let mut next_meas = 0;
    if let Some(first) = measurements.first() {
        if first.time < initial.time - config.time_tolerance {
            return Err(EkfError::MisalignedMeasurement(first.time));
        }
    }
    for (i, sample) in imu.iter().enumerate() {
        let dt = sample.time - state.time;
        if !(dt > 0.0) {
            return Err(EkfError::NonMonotoneTime {
                index: i,
                time: sample.time,
            });
        }
        let (f, g) = build_error_dynamics(&state, sample, dt)?;
        state = ins.propagate(&state, sample, dt)?;
        state.time = sample.time;
        err = predict(&err, &f, &g, &q_step);
        gamma = f * gamma + g;
        steps += 1;

        let mut row = RunRow {
            time: state.time,
            x: StateVector::zeros(),
            p_diag: err.p.diagonal(),
            innovation: Vector3::zeros(),
            nav: state,
        };

        if let Some(meas) = measurements.get(next_meas) {
            if meas.time < sample.time - config.time_tolerance {
                return Err(EkfError::MisalignedMeasurement(meas.time));
            }
            if (meas.time - sample.time).abs() <= config.time_tolerance {
                next_meas += 1;
                let (v_nav, r_nav) = match meas.frame {
                    MeasurementFrame::Body => {
                        let c = state.attitude.to_rotation_matrix().into_inner();
                        (c * meas.velocity, c * meas.covariance * c.transpose())
                    }
                    MeasurementFrame::Navigation => (meas.velocity, meas.covariance),
                };
                let r_nav = (r_nav + r_nav.transpose()) * 0.5;
                let innovation = v_nav - state.velocity;
                let nominal = if config.use_cross_correlation {
                    interval_cross_cov(&gamma, steps, &q_step, &r_nav, noise.rho, config.support)?
                } else {
                    CrossCovariance::zeros()
                };
                let (m, cross_cov_scale) = if config.limit_cross_cov {
                    limit_cross_cov(&err.p, &r_nav, &nominal)
                } else {
                    (nominal, 1.0)
                };
                if cross_cov_scale < 1.0 {
                    cross_cov_limited += 1;
                }
                let model = ErrorStateModel {
                    f,
                    g,
                    h,
                    q: q_step,
                    r: r_nav,
                    m,
                };
                let (posterior, outcome) = update_correlated(&err, &model, &innovation)?;
                psd_clamps += outcome.clamped;
                let (corrected, reset) = inject_and_reset(&state, &posterior)?;
                state = corrected;
                err = reset;
                gamma = StateMatrix::zeros();
                steps = 0;
                row = RunRow {
                    time: state.time,
                    x: posterior.x,
                    p_diag: err.p.diagonal(),
                    innovation,
                    nav: state,
                };
                updates.push(UpdateRecord {
                    row: rows.len(),
                    time: state.time,
                    innovation,
                    gain_norm: outcome.gain.norm(),
                    source: meas.source,
                    cross_cov: m,
                    cross_cov_scale,
                    covariance: err.p,
                    nav: state,
                });
            }
        }
        rows.push(row);
    }
    if next_meas < measurements.len() {
        return Err(EkfError::MisalignedMeasurement(measurements[next_meas].time));
    }
    Ok(FilterRun {
        tag,
        rows,
        updates,
        psd_clamps,
        cross_cov_limited,
    })
}
