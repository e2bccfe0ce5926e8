//! Error-state EKF with process/measurement noise cross-correlation.
//!
//! The error state is the 12-vector
//! `[delta_v (3), psi (3), delta_b_a (3), delta_b_g (3)]`, every component
//! defined as *true minus estimated*. `psi` is the navigation-frame
//! misalignment, `C_true = exp([psi]x) C_est`.
//!
//! The measurement update uses the gain for noise where the process noise
//! driving the last propagation interval is correlated with the measurement
//! noise of the epoch that closes it, `E[w_{k-1} v_k^T] = M_k`, with `M_k`
//! expressed in error-state coordinates:
//!
//! ```text
//! S = H P H^T + H M + M^T H^T + R
//! K = (P H^T + M) S^-1
//! P+ = P - K (H P + M^T)
//! ```
//!
//! With `M = 0` this is the ordinary Kalman update.

mod fusion;

pub use fusion::{
    fuse_run, FilterConfig, FilterRun, InitialUncertainty, MeasurementFrame, MeasurementSource, RunMode, RunRow, RunTag,
    UpdateRecord, VelocityMeasurement,
};

use nalgebra::{Cholesky, DMatrix, Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ins::{mid_attitude, ImuSample, InsError, NavState};

pub const STATE_DIM: usize = 12;
pub const MEAS_DIM: usize = 3;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ObservationMatrix = SMatrix<f64, MEAS_DIM, STATE_DIM>;
pub type CrossCovariance = SMatrix<f64, STATE_DIM, MEAS_DIM>;
pub type GainMatrix = SMatrix<f64, STATE_DIM, MEAS_DIM>;

/// Offsets of the four 3-axis groups inside the error state.
pub mod idx {
    pub const VEL: usize = 0;
    pub const ATT: usize = 3;
    pub const ACC_BIAS: usize = 6;
    pub const GYR_BIAS: usize = 9;
}

/// Posterior diagonal entries in `[-DIAG_CLAMP_TOL, 0)` are clamped to zero.
pub const DIAG_CLAMP_TOL: f64 = 1e-12;
/// Relative threshold on the smallest eigenvalue of `S`.
pub const PD_REL_TOL: f64 = 1e-12;
/// Relative tolerance on negative covariance eigenvalues after an update.
pub const PSD_REL_TOL: f64 = 1e-9;
/// Fraction of the feasible cross-covariance kept when `M` has to be scaled
/// down to keep the joint prior covariance of state and measurement noise
/// positive semi-definite.
pub const CROSS_COV_MARGIN: f64 = 0.98;
/// Largest misalignment accepted for the small-angle injection.
pub const MAX_INJECT_ANGLE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("correlation coefficient {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("{what} has negative diagonal entry {value} at index {index}")]
    NegativeDiagonal {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("innovation covariance is not positive definite (eigenvalues {eigenvalues:?})")]
    Divergence { eigenvalues: Vec<f64> },
    #[error("posterior covariance lost positive semi-definiteness (min eigenvalue {min_eigenvalue:.3e}, trace {trace:.3e})")]
    Inconsistent { min_eigenvalue: f64, trace: f64 },
    #[error("misalignment of {0} rad exceeds the small-angle limit")]
    SmallAngleViolation(f64),
    #[error("timestamps not strictly increasing at index {index} (t = {time})")]
    NonMonotoneTime { index: usize, time: f64 },
    #[error("measurement at t = {0} does not coincide with an IMU sample")]
    MisalignedMeasurement(f64),
    #[error(transparent)]
    Ins(#[from] InsError),
}

/// Sensor noise parameters feeding `Q`, `R` and the cross-covariance scale.
///
/// IMU quantities are per-sample standard deviations at the IMU rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub accel_noise: f64,
    pub gyro_noise: f64,
    pub accel_bias_rw: f64,
    pub gyro_bias_rw: f64,
    /// Along-beam DVL noise, m/s.
    pub dvl_meas_sigma: f64,
    pub rho: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            accel_noise: 0.03,
            gyro_noise: 0.005,
            accel_bias_rw: 3e-6,
            gyro_bias_rw: 5e-7,
            dvl_meas_sigma: 0.02,
            rho: 0.42,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), EkfError> {
        let sigmas = [
            ("accel_noise", self.accel_noise),
            ("gyro_noise", self.gyro_noise),
            ("accel_bias_rw", self.accel_bias_rw),
            ("gyro_bias_rw", self.gyro_bias_rw),
            ("dvl_meas_sigma", self.dvl_meas_sigma),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(EkfError::InvalidNoise(format!("{name} = {s}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(EkfError::InvalidRho(self.rho));
        }
        Ok(())
    }

    /// Per-step covariance of `w = [n_a, n_g, w_ba, w_bg]`.
    pub fn process_covariance(&self) -> StateMatrix {
        let mut q = StateMatrix::zeros();
        for i in 0..3 {
            q[(i, i)] = self.accel_noise.powi(2);
            q[(3 + i, 3 + i)] = self.gyro_noise.powi(2);
            q[(6 + i, 6 + i)] = self.accel_bias_rw.powi(2);
            q[(9 + i, 9 + i)] = self.gyro_bias_rw.powi(2);
        }
        q
    }
}

/// Linearized model of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStateModel {
    pub f: StateMatrix,
    pub g: StateMatrix,
    pub h: ObservationMatrix,
    pub q: StateMatrix,
    pub r: Matrix3<f64>,
    pub m: CrossCovariance,
}

/// Error-state mean and covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState {
    pub x: StateVector,
    pub p: StateMatrix,
}

impl ErrorState {
    pub fn new(p: StateMatrix) -> Self {
        Self {
            x: StateVector::zeros(),
            p,
        }
    }

    pub fn delta_v(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(idx::VEL).into_owned()
    }

    pub fn misalignment(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(idx::ATT).into_owned()
    }

    pub fn accel_bias_err(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(idx::ACC_BIAS).into_owned()
    }

    pub fn gyro_bias_err(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(idx::GYR_BIAS).into_owned()
    }

    pub fn std_devs(&self) -> StateVector {
        self.p.diagonal().map(|d| d.max(0.0).sqrt())
    }
}

/// `H = [I_3 0 0 0]`: the velocity error is observed directly.
pub fn velocity_observation() -> ObservationMatrix {
    let mut h = ObservationMatrix::zeros();
    h.fixed_view_mut::<3, 3>(0, idx::VEL).fill_with_identity();
    h
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Continuous-time error dynamics `A` for a body-to-nav rotation and a
/// bias-compensated body specific force.
pub fn continuous_jacobian(attitude: &UnitQuaternion<f64>, force_body: &Vector3<f64>) -> StateMatrix {
    let c = attitude.to_rotation_matrix().into_inner();
    let mut a = StateMatrix::zeros();
    a.fixed_view_mut::<3, 3>(idx::VEL, idx::ATT)
        .copy_from(&(-skew(&(c * force_body))));
    a.fixed_view_mut::<3, 3>(idx::VEL, idx::ACC_BIAS).copy_from(&(-c));
    a.fixed_view_mut::<3, 3>(idx::ATT, idx::GYR_BIAS).copy_from(&(-c));
    a
}

/// Discrete `(F, G)` for one IMU step taken from `state` with `sample`.
///
/// `A` is evaluated at the mid-step attitude used by the mechanization and
/// `F = I + A dt + (A dt)^2 / 2`, which is the exact exponential because
/// `A^3 = 0`. `G` maps the per-sample noise `[n_a, n_g, w_ba, w_bg]` onto the
/// error state.
pub fn build_error_dynamics(
    state: &NavState,
    sample: &ImuSample,
    dt: f64,
) -> Result<(StateMatrix, StateMatrix), EkfError> {
    if !(dt > 0.0) {
        return Err(EkfError::NonPositiveStep(dt));
    }
    let rate = sample.angular_rate - state.gyro_bias;
    let force = sample.specific_force - state.accel_bias;
    let mid = mid_attitude(&state.attitude, &rate, dt);
    let a_dt = continuous_jacobian(&mid, &force) * dt;
    let f = StateMatrix::identity() + a_dt + a_dt * a_dt * 0.5;

    let c = mid.to_rotation_matrix().into_inner();
    let mut g = StateMatrix::zeros();
    g.fixed_view_mut::<3, 3>(idx::VEL, 0).copy_from(&(-c * dt));
    g.fixed_view_mut::<3, 3>(idx::ATT, 3).copy_from(&(-c * dt));
    g.fixed_view_mut::<3, 3>(idx::ACC_BIAS, 6).fill_with_identity();
    g.fixed_view_mut::<3, 3>(idx::GYR_BIAS, 9).fill_with_identity();
    Ok((f, g))
}

/// Which rows of the cross-covariance are populated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossCovSupport {
    /// Only the accelerometer and gyroscope white-noise channels; the bias
    /// random-walk channels carry no correlation.
    #[default]
    NavNoise,
    /// All twelve rows.
    Dense,
}

impl CrossCovSupport {
    fn rows(self) -> std::ops::Range<usize> {
        match self {
            CrossCovSupport::NavNoise => 0..idx::ACC_BIAS,
            CrossCovSupport::Dense => 0..STATE_DIM,
        }
    }
}

/// `M_ij = rho * sqrt(Q_ii) * sqrt(R_jj)` on the supported rows.
pub fn build_cross_cov<const N: usize, const Z: usize>(
    q: &SMatrix<f64, N, N>,
    r: &SMatrix<f64, Z, Z>,
    rho: f64,
    rows: std::ops::Range<usize>,
) -> Result<SMatrix<f64, N, Z>, EkfError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(EkfError::InvalidRho(rho));
    }
    for i in 0..N {
        if q[(i, i)] < 0.0 {
            return Err(EkfError::NegativeDiagonal {
                what: "Q",
                index: i,
                value: q[(i, i)],
            });
        }
    }
    for j in 0..Z {
        if r[(j, j)] < 0.0 {
            return Err(EkfError::NegativeDiagonal {
                what: "R",
                index: j,
                value: r[(j, j)],
            });
        }
    }
    let mut m = SMatrix::<f64, N, Z>::zeros();
    for i in rows.filter(|&i| i < N) {
        for j in 0..Z {
            m[(i, j)] = rho * q[(i, i)].sqrt() * r[(j, j)].sqrt();
        }
    }
    Ok(m)
}

/// Noise-channel cross-covariance `E[w v^T]` for the 12 process-noise
/// channels `[n_a, n_g, w_ba, w_bg]`.
pub fn build_state_cross_cov(
    q: &StateMatrix,
    r: &Matrix3<f64>,
    rho: f64,
    support: CrossCovSupport,
) -> Result<CrossCovariance, EkfError> {
    build_cross_cov(q, r, rho, support.rows())
}

/// State-space cross-covariance between the noise accumulated over one
/// measurement interval and the measurement error.
///
/// The error is correlated with the interval sums of the noise channels,
/// whose covariance is `steps * q_step`, and shares that correlation evenly
/// across the steps. `gamma` is `sum_k Phi(end, k+1) G_k` over the interval.
pub fn interval_cross_cov(
    gamma: &StateMatrix,
    steps: usize,
    q_step: &StateMatrix,
    r: &Matrix3<f64>,
    rho: f64,
    support: CrossCovSupport,
) -> Result<CrossCovariance, EkfError> {
    if steps == 0 {
        return Ok(CrossCovariance::zeros());
    }
    let n = steps as f64;
    let m_channels = build_state_cross_cov(&(q_step * n), r, rho, support)?;
    Ok(gamma * m_channels / n)
}

/// Largest `mu` with `M^T P^-1 M <= mu R`. The joint covariance
/// `[[P, M], [M^T, R]]`, and with it the posterior of the correlated update,
/// is positive semi-definite iff `mu <= 1`. Returns `None` when `P` or `R` is
/// not positive definite.
pub fn cross_cov_load<const N: usize, const Z: usize>(
    p: &SMatrix<f64, N, N>,
    r: &SMatrix<f64, Z, Z>,
    m: &SMatrix<f64, N, Z>,
) -> Option<f64> {
    let pc = Cholesky::new((p + p.transpose()) * 0.5)?;
    let rc = Cholesky::new((r + r.transpose()) * 0.5)?;
    let a = m.transpose() * pc.solve(m);
    let l = rc.l();
    let x = l.solve_lower_triangular(&a)?;
    let b = l.solve_lower_triangular(&x.transpose())?;
    Some(symmetric_eigenvalues(&((b + b.transpose()) * 0.5))[Z - 1].max(0.0))
}

/// Scales `M` down, if needed, so the joint prior stays feasible with load
/// at most `CROSS_COV_MARGIN`. Returns the scaled matrix and the factor.
pub fn limit_cross_cov<const N: usize, const Z: usize>(
    p: &SMatrix<f64, N, N>,
    r: &SMatrix<f64, Z, Z>,
    m: &SMatrix<f64, N, Z>,
) -> (SMatrix<f64, N, Z>, f64) {
    match cross_cov_load(p, r, m) {
        Some(mu) if mu > CROSS_COV_MARGIN => {
            let scale = (CROSS_COV_MARGIN / mu).sqrt();
            (m * scale, scale)
        }
        _ => (*m, 1.0),
    }
}

pub fn innovation_covariance<const N: usize, const Z: usize>(
    p: &SMatrix<f64, N, N>,
    h: &SMatrix<f64, Z, N>,
    r: &SMatrix<f64, Z, Z>,
    m: &SMatrix<f64, N, Z>,
) -> SMatrix<f64, Z, Z> {
    let hm = h * m;
    let s = h * p * h.transpose() + hm + hm.transpose() + r;
    (s + s.transpose()) * 0.5
}

fn symmetric_eigenvalues<const Z: usize>(s: &SMatrix<f64, Z, Z>) -> Vec<f64> {
    let d = DMatrix::from_iterator(Z, Z, s.iter().copied());
    let mut ev: Vec<f64> = d.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Correlated-noise Kalman gain, solved through a Cholesky factor of `S`.
pub fn gain_correlated<const N: usize, const Z: usize>(
    p: &SMatrix<f64, N, N>,
    h: &SMatrix<f64, Z, N>,
    r: &SMatrix<f64, Z, Z>,
    m: &SMatrix<f64, N, Z>,
) -> Result<SMatrix<f64, N, Z>, EkfError> {
    let s = innovation_covariance(p, h, r, m);
    let eig = symmetric_eigenvalues(&s);
    let threshold = PD_REL_TOL * s.trace().abs() / Z as f64;
    if eig.first().is_none_or(|&min| !(min > threshold)) {
        return Err(EkfError::Divergence { eigenvalues: eig });
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| EkfError::Divergence { eigenvalues: eig })?;
    // K S = P H^T + M, with S symmetric: S K^T = H P + M^T.
    let rhs = h * p + m.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// Result of one measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Updated<const N: usize, const Z: usize> {
    pub x: SVector<f64, N>,
    pub p: SMatrix<f64, N, N>,
    pub gain: SMatrix<f64, N, Z>,
    /// Number of slightly negative diagonal entries clamped to zero.
    pub clamped: usize,
}

/// Generic correlated update: `x + K nu`, `P - K (H P + M^T)`, symmetrized.
pub fn correlated_update<const N: usize, const Z: usize>(
    x: &SVector<f64, N>,
    p: &SMatrix<f64, N, N>,
    h: &SMatrix<f64, Z, N>,
    r: &SMatrix<f64, Z, Z>,
    m: &SMatrix<f64, N, Z>,
    innovation: &SVector<f64, Z>,
) -> Result<Updated<N, Z>, EkfError> {
    let k = gain_correlated(p, h, r, m)?;
    let x_post = x + k * innovation;
    let p_post = p - k * (h * p + m.transpose());
    let mut p_post = (p_post + p_post.transpose()) * 0.5;
    let mut clamped = 0;
    for i in 0..N {
        let d = p_post[(i, i)];
        if d < -DIAG_CLAMP_TOL {
            return Err(EkfError::Inconsistent {
                min_eigenvalue: d,
                trace: p_post.trace(),
            });
        }
        if d < 0.0 {
            p_post[(i, i)] = 0.0;
            clamped += 1;
        }
    }
    let trace = p_post.trace();
    let min_eig = symmetric_eigenvalues(&p_post)[0];
    if min_eig < -PSD_REL_TOL * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(EkfError::Inconsistent {
            min_eigenvalue: min_eig,
            trace,
        });
    }
    Ok(Updated {
        x: x_post,
        p: p_post,
        gain: k,
        clamped,
    })
}

/// Measurement update of the 12-state filter. `innovation = y - H x`.
pub fn update_correlated(
    err: &ErrorState,
    model: &ErrorStateModel,
    innovation: &Vector3<f64>,
) -> Result<(ErrorState, Updated<STATE_DIM, MEAS_DIM>), EkfError> {
    let up = correlated_update(&err.x, &err.p, &model.h, &model.r, &model.m, innovation)?;
    Ok((ErrorState { x: up.x, p: up.p }, up))
}

/// Generic prediction `x <- F x`, `P <- F P F^T + G Q G^T`, symmetrized.
pub fn predict_generic<const N: usize, const W: usize>(
    x: &SVector<f64, N>,
    p: &SMatrix<f64, N, N>,
    f: &SMatrix<f64, N, N>,
    g: &SMatrix<f64, N, W>,
    q: &SMatrix<f64, W, W>,
) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let p = f * p * f.transpose() + g * q * g.transpose();
    (f * x, (p + p.transpose()) * 0.5)
}

pub fn predict(err: &ErrorState, f: &StateMatrix, g: &StateMatrix, q: &StateMatrix) -> ErrorState {
    let (x, p) = predict_generic(&err.x, &err.p, f, g, q);
    ErrorState { x, p }
}

/// Applies `state ⊞ dx`, the same composition used for the error definition.
pub fn apply_error(state: &NavState, dx: &StateVector) -> NavState {
    let dv = dx.fixed_rows::<3>(idx::VEL).into_owned();
    let psi = dx.fixed_rows::<3>(idx::ATT).into_owned();
    let dba = dx.fixed_rows::<3>(idx::ACC_BIAS).into_owned();
    let dbg = dx.fixed_rows::<3>(idx::GYR_BIAS).into_owned();
    let attitude = UnitQuaternion::from_scaled_axis(psi) * state.attitude;
    NavState {
        velocity: state.velocity + dv,
        attitude: UnitQuaternion::new_normalize(attitude.into_inner()),
        accel_bias: state.accel_bias + dba,
        gyro_bias: state.gyro_bias + dbg,
        ..*state
    }
}

/// `truth ⊟ estimate`: the error state that `apply_error` would need to turn
/// `estimate` into `truth`.
pub fn nav_error(truth: &NavState, estimate: &NavState) -> StateVector {
    let mut e = StateVector::zeros();
    let dq = truth.attitude * estimate.attitude.inverse();
    e.fixed_rows_mut::<3>(idx::VEL)
        .copy_from(&(truth.velocity - estimate.velocity));
    e.fixed_rows_mut::<3>(idx::ATT).copy_from(&dq.scaled_axis());
    e.fixed_rows_mut::<3>(idx::ACC_BIAS)
        .copy_from(&(truth.accel_bias - estimate.accel_bias));
    e.fixed_rows_mut::<3>(idx::GYR_BIAS)
        .copy_from(&(truth.gyro_bias - estimate.gyro_bias));
    e
}

/// Closed-loop correction: fold the error estimate into the navigation state
/// and zero the error mean. The covariance is left untouched.
pub fn inject_and_reset(state: &NavState, err: &ErrorState) -> Result<(NavState, ErrorState), EkfError> {
    let angle = err.misalignment().norm();
    if !(angle < MAX_INJECT_ANGLE) {
        return Err(EkfError::SmallAngleViolation(angle));
    }
    Ok((apply_error(state, &err.x), ErrorState::new(err.p)))
}

#[cfg(test)]
mod tests;
