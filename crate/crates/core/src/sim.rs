//! Ground-truth trajectories and sensor corruption.
//!
//! The vehicle moves along its body x axis with surge speed `u(t)` and an
//! optional constant heave rate. Heading follows the chosen profile; roll and
//! pitch carry a small sinusoidal wobble. IMU samples are derived from the
//! sampled truth so that one mechanization step reproduces the next truth
//! state exactly:
//!
//! * `omega_k = log(q_{k-1}^-1 q_k) / dt`
//! * `f_k = C_mid^T ((v_k - v_{k-1}) / dt - g_n)` with the mid-step attitude.
//!
//! Both agree with the instantaneous `C_n^b (dv/dt - g_n)` and body rate to
//! `O(dt^2)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dvl::{corrupt_beams, BeamCorruption, BeamGeometry, DvlBeams, DvlError};
use crate::ekf::NoiseModel;
use crate::ins::{mid_attitude, ImuSample, NavState};

pub const MAX_TURN_RATE: f64 = 0.5;
pub const MAX_WOBBLE: f64 = 0.5;

/// Width, in standard errors, of the band used to flag a sample correlation.
pub const SIGNIFICANCE_SIGMAS: f64 = 3.0;
pub const MIN_CORRELATION_SAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("inconsistent trajectory profile: {0}")]
    InvalidProfile(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("DVL rate {dvl} Hz does not divide the IMU rate {imu} Hz")]
    RateMismatch { dvl: f64, imu: f64 },
    #[error("sequence lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} aligned samples, need at least {MIN_CORRELATION_SAMPLES}")]
    TooShort(usize),
    #[error("noise sigma must be non-negative: {0}")]
    NegativeSigma(String),
    #[error(transparent)]
    Dvl(#[from] DvlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Straight,
    /// Survey pattern: straight legs joined by alternating half turns.
    Lawnmower,
    SinusoidHeading,
    /// Straight legs joined by half turns in the same direction. A zero leg
    /// length gives a circle.
    Racetrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProfile {
    pub kind: TrajectoryKind,
    /// Mean surge speed, m/s.
    pub speed: f64,
    pub duration: f64,
    /// Straight leg length for lawnmower and racetrack, m.
    pub leg_length: f64,
    /// Turn rate of the half turns, or peak rate of the sinusoidal heading, rad/s.
    pub turn_rate: f64,
    /// Period of the sinusoidal heading, s.
    pub heading_period: f64,
    /// Amplitude of the sinusoidal surge-speed modulation, m/s.
    pub speed_variation: f64,
    pub speed_period: f64,
    /// Constant body-z velocity (positive down), m/s.
    pub heave_rate: f64,
    /// Amplitude of the sinusoidal body-y (sway) velocity, m/s.
    pub sway_amplitude: f64,
    pub sway_period: f64,
    /// Roll/pitch oscillation amplitude, rad.
    pub wobble_amplitude: f64,
    pub wobble_period: f64,
    pub initial_heading: f64,
}

impl Default for TrajectoryProfile {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Lawnmower,
            speed: 1.5,
            duration: 400.0,
            leg_length: 90.0,
            turn_rate: 0.1,
            heading_period: 60.0,
            speed_variation: 0.0,
            speed_period: 120.0,
            heave_rate: 0.0,
            sway_amplitude: 0.0,
            sway_period: 90.0,
            wobble_amplitude: 0.01,
            wobble_period: 8.0,
            initial_heading: 0.0,
        }
    }
}

impl TrajectoryProfile {
    pub fn straight(speed: f64, duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Straight,
            speed,
            duration,
            wobble_amplitude: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidProfile(msg));
        if !(self.duration > 0.0) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if !(self.speed >= 0.0) {
            return bad(format!("speed {} must be non-negative", self.speed));
        }
        if !(self.speed_variation >= 0.0) || (self.speed_variation > 0.0 && self.speed_variation >= self.speed)
        {
            return bad(format!(
                "speed variation {} must be in [0, speed)",
                self.speed_variation
            ));
        }
        if !(self.speed_period > 0.0) || !(self.wobble_period > 0.0) || !(self.sway_period > 0.0) {
            return bad("periods must be positive".into());
        }
        if !(self.wobble_amplitude >= 0.0 && self.wobble_amplitude < MAX_WOBBLE) {
            return bad(format!("wobble amplitude {} out of range", self.wobble_amplitude));
        }
        if !self.heave_rate.is_finite() || !self.initial_heading.is_finite() || !self.sway_amplitude.is_finite() {
            return bad("non-finite heave rate, sway or heading".into());
        }
        match self.kind {
            TrajectoryKind::Straight => {}
            TrajectoryKind::Lawnmower | TrajectoryKind::Racetrack => {
                self.check_turn_rate()?;
                if !(self.leg_length >= 0.0) {
                    return bad(format!("leg length {} must be non-negative", self.leg_length));
                }
                if self.kind == TrajectoryKind::Lawnmower && !(self.leg_length > 0.0 && self.speed > 0.0) {
                    return bad("lawnmower needs a positive leg length and speed".into());
                }
                if self.leg_length > 0.0 && !(self.speed > 0.0) {
                    return bad("legs need a positive speed".into());
                }
            }
            TrajectoryKind::SinusoidHeading => {
                self.check_turn_rate()?;
                if !(self.heading_period > 0.0) {
                    return bad(format!("heading period {} must be positive", self.heading_period));
                }
            }
        }
        Ok(())
    }

    fn check_turn_rate(&self) -> Result<(), SimError> {
        if self.turn_rate > 0.0 && self.turn_rate <= MAX_TURN_RATE {
            Ok(())
        } else {
            Err(SimError::InvalidProfile(format!(
                "turn rate {} must be in (0, {MAX_TURN_RATE}]",
                self.turn_rate
            )))
        }
    }

    pub fn surge_speed(&self, t: f64) -> f64 {
        self.speed + self.speed_variation * (TAU * t / self.speed_period).sin()
    }

    pub fn heading(&self, t: f64) -> f64 {
        let psi0 = self.initial_heading;
        match self.kind {
            TrajectoryKind::Straight => psi0,
            TrajectoryKind::SinusoidHeading => {
                let amp = self.turn_rate * self.heading_period / TAU;
                psi0 + amp * (TAU * t / self.heading_period).sin()
            }
            TrajectoryKind::Lawnmower | TrajectoryKind::Racetrack => {
                let leg = if self.leg_length > 0.0 {
                    self.leg_length / self.speed
                } else {
                    0.0
                };
                let turn = PI / self.turn_rate;
                let cycle = 2.0 * (leg + turn);
                let laps = (t / cycle).floor();
                let tau = t - laps * cycle;
                let r = self.turn_rate;
                let lap_offset = if self.kind == TrajectoryKind::Racetrack {
                    laps * TAU
                } else {
                    0.0
                };
                let within = if tau < leg {
                    0.0
                } else if tau < leg + turn {
                    r * (tau - leg)
                } else if tau < 2.0 * leg + turn {
                    PI
                } else if self.kind == TrajectoryKind::Lawnmower {
                    PI - r * (tau - 2.0 * leg - turn)
                } else {
                    PI + r * (tau - 2.0 * leg - turn)
                };
                psi0 + lap_offset + within
            }
        }
    }

    pub fn attitude(&self, t: f64) -> UnitQuaternion<f64> {
        let w = TAU * t / self.wobble_period;
        let roll = self.wobble_amplitude * w.sin();
        let pitch = 0.5 * self.wobble_amplitude * (w / 1.3 + 1.0).sin();
        UnitQuaternion::from_euler_angles(roll, pitch, self.heading(t))
    }

    pub fn body_velocity(&self, t: f64) -> Vector3<f64> {
        let sway = self.sway_amplitude * (TAU * t / self.sway_period).sin();
        Vector3::new(self.surge_speed(t), sway, self.heave_rate)
    }
}

/// True navigation state at one IMU epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub time: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
}

impl TruthState {
    pub fn nav_state(&self, accel_bias: Vector3<f64>, gyro_bias: Vector3<f64>) -> NavState {
        NavState {
            time: self.time,
            position: self.position,
            velocity: self.velocity,
            attitude: self.attitude,
            accel_bias,
            gyro_bias,
        }
    }

    pub fn body_velocity(&self) -> Vector3<f64> {
        self.attitude.inverse_transform_vector(&self.velocity)
    }
}

/// Sampled truth: `states[k]` at `t = k dt`, and `imu[k]` carrying the
/// vehicle from `states[k]` to `states[k + 1]` (stamped with the end time).
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTruth {
    pub dt: f64,
    pub gravity: f64,
    pub states: Vec<TruthState>,
    pub imu: Vec<ImuSample>,
}

pub fn generate(profile: &TrajectoryProfile, dt: f64, gravity: f64) -> Result<SensorTruth, SimError> {
    profile.validate()?;
    if !(dt > 0.0) {
        return Err(SimError::NonPositiveStep(dt));
    }
    let steps = (profile.duration / dt).round() as usize;
    let g = Vector3::new(0.0, 0.0, gravity);
    let mut states = Vec::with_capacity(steps + 1);
    let mut imu = Vec::with_capacity(steps);
    let at = |k: usize| {
        let t = k as f64 * dt;
        let q = profile.attitude(t);
        (t, q, q * profile.body_velocity(t))
    };
    let (t0, q0, v0) = at(0);
    states.push(TruthState {
        time: t0,
        position: Vector3::zeros(),
        velocity: v0,
        attitude: q0,
    });
    for k in 1..=steps {
        let prev = states[k - 1];
        let (t, q, v) = at(k);
        let rate = (prev.attitude.inverse() * q).scaled_axis() / dt;
        let mid = mid_attitude(&prev.attitude, &rate, dt);
        let force = mid.inverse_transform_vector(&((v - prev.velocity) / dt - g));
        imu.push(ImuSample {
            time: t,
            specific_force: force,
            angular_rate: rate,
        });
        states.push(TruthState {
            time: t,
            position: prev.position + (prev.velocity + v) * (0.5 * dt),
            velocity: v,
            attitude: q,
        });
    }
    Ok(SensorTruth {
        dt,
        gravity,
        states,
        imu,
    })
}

/// IMU error realizations, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuNoiseLog {
    /// `[n_a, n_g, db_a, db_g]`: white noise and bias increments of each sample.
    pub process: Vec<SVector<f64, 12>>,
    /// Bias in effect during each sample.
    pub accel_bias: Vec<Vector3<f64>>,
    pub gyro_bias: Vec<Vector3<f64>>,
}

impl ImuNoiseLog {
    /// Sum of the per-sample process noise over consecutive intervals ending
    /// at the given (inclusive) sample indices.
    pub fn interval_sums(&self, interval_ends: &[usize]) -> Vec<SVector<f64, 12>> {
        let mut start = 0;
        interval_ends
            .iter()
            .map(|&end| {
                let s = self.process[start..=end].iter().sum();
                start = end + 1;
                s
            })
            .collect()
    }
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// Adds white noise and random-walk biases to the true IMU samples.
pub fn corrupt_imu<R: Rng + ?Sized>(
    truth: &SensorTruth,
    noise: &NoiseModel,
    initial_accel_bias: Vector3<f64>,
    initial_gyro_bias: Vector3<f64>,
    rng: &mut R,
) -> Result<(Vec<ImuSample>, ImuNoiseLog), SimError> {
    noise
        .validate()
        .map_err(|e| SimError::NegativeSigma(e.to_string()))?;
    let n = truth.imu.len();
    let mut out = Vec::with_capacity(n);
    let mut log = ImuNoiseLog {
        process: Vec::with_capacity(n),
        accel_bias: Vec::with_capacity(n),
        gyro_bias: Vec::with_capacity(n),
    };
    let mut ba = initial_accel_bias;
    let mut bg = initial_gyro_bias;
    for sample in &truth.imu {
        let na = gaussian3(rng, noise.accel_noise);
        let ng = gaussian3(rng, noise.gyro_noise);
        let dba = gaussian3(rng, noise.accel_bias_rw);
        let dbg = gaussian3(rng, noise.gyro_bias_rw);
        ba += dba;
        bg += dbg;
        out.push(ImuSample {
            time: sample.time,
            specific_force: sample.specific_force + ba + na,
            angular_rate: sample.angular_rate + bg + ng,
        });
        let mut w = SVector::<f64, 12>::zeros();
        w.fixed_rows_mut::<3>(0).copy_from(&na);
        w.fixed_rows_mut::<3>(3).copy_from(&ng);
        w.fixed_rows_mut::<3>(6).copy_from(&dba);
        w.fixed_rows_mut::<3>(9).copy_from(&dbg);
        log.process.push(w);
        log.accel_bias.push(ba);
        log.gyro_bias.push(bg);
    }
    Ok((out, log))
}

/// Simulated DVL output.
#[derive(Debug, Clone, PartialEq)]
pub struct DvlLog {
    pub epochs: Vec<DvlBeams>,
    /// Measured minus true along-beam velocity.
    pub noise: Vec<Vector4<f64>>,
    pub true_body_velocity: Vec<Vector3<f64>>,
    /// Index into `SensorTruth::states` of each epoch.
    pub state_index: Vec<usize>,
}

impl DvlLog {
    /// Index of the IMU sample closing each epoch.
    pub fn imu_index(&self) -> Vec<usize> {
        self.state_index.iter().map(|&i| i - 1).collect()
    }
}

/// Number of IMU samples per DVL epoch; errors unless the rates divide.
pub fn rate_stride(imu_rate: f64, dvl_rate: f64) -> Result<usize, SimError> {
    let ratio = imu_rate / dvl_rate;
    if !(dvl_rate > 0.0 && imu_rate > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return Err(SimError::RateMismatch {
            dvl: dvl_rate,
            imu: imu_rate,
        });
    }
    Ok(ratio.round() as usize)
}

/// DVL beams at every `imu_rate / dvl_rate`-th truth state.
pub fn emit_dvl<R: Rng + ?Sized>(
    truth: &SensorTruth,
    geom: &BeamGeometry,
    dvl_rate: f64,
    corruption: &BeamCorruption,
    rng: &mut R,
) -> Result<DvlLog, SimError> {
    let stride = rate_stride(1.0 / truth.dt, dvl_rate)?;
    let mut log = DvlLog {
        epochs: Vec::new(),
        noise: Vec::new(),
        true_body_velocity: Vec::new(),
        state_index: Vec::new(),
    };
    for k in (stride..truth.states.len()).step_by(stride) {
        let s = &truth.states[k];
        let vb = s.body_velocity();
        let clean = geom.beams_from_velocity(&vb);
        let beams = corrupt_beams(&clean, corruption, rng)?;
        log.epochs.push(DvlBeams::all_valid(s.time, beams));
        log.noise.push(beams - clean);
        log.true_body_velocity.push(vb);
        log.state_index.push(k);
    }
    Ok(log)
}

/// Sample cross-covariance between two aligned sequences at a lag.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation<const R: usize, const C: usize> {
    pub covariance: SMatrix<f64, R, C>,
    pub correlation: SMatrix<f64, R, C>,
    /// Half-width of the null band on the correlation coefficients.
    pub band: f64,
    pub samples: usize,
}

impl<const R: usize, const C: usize> CrossCorrelation<R, C> {
    pub fn significant(&self, i: usize, j: usize) -> bool {
        self.correlation[(i, j)].abs() > self.band
    }

    pub fn significant_count(&self) -> usize {
        self.correlation.iter().filter(|c| c.abs() > self.band).count()
    }

    pub fn max_abs_correlation(&self) -> f64 {
        self.correlation.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// Pairs `w[k]` with `e[k + lag]` and returns the sample cross-covariance
/// with a `±3/sqrt(N)` significance band on the correlation coefficients.
/// Constant components get a zero correlation.
pub fn empirical_cross_corr<const R: usize, const C: usize>(
    w: &[SVector<f64, R>],
    e: &[SVector<f64, C>],
    lag: isize,
) -> Result<CrossCorrelation<R, C>, SimError> {
    if w.len() != e.len() {
        return Err(SimError::LengthMismatch(w.len(), e.len()));
    }
    let len = w.len() as isize;
    let pairs: Vec<(usize, usize)> = (0..len)
        .filter(|k| (0..len).contains(&(k + lag)))
        .map(|k| (k as usize, (k + lag) as usize))
        .collect();
    let n = pairs.len();
    if n < MIN_CORRELATION_SAMPLES {
        return Err(SimError::TooShort(n));
    }
    let nf = n as f64;
    let mean_w: SVector<f64, R> = pairs.iter().map(|&(a, _)| w[a]).sum::<SVector<f64, R>>() / nf;
    let mean_e: SVector<f64, C> = pairs.iter().map(|&(_, b)| e[b]).sum::<SVector<f64, C>>() / nf;
    let mut cov = SMatrix::<f64, R, C>::zeros();
    let mut var_w = SVector::<f64, R>::zeros();
    let mut var_e = SVector::<f64, C>::zeros();
    for &(a, b) in &pairs {
        let dw = w[a] - mean_w;
        let de = e[b] - mean_e;
        cov += dw * de.transpose();
        var_w += dw.component_mul(&dw);
        var_e += de.component_mul(&de);
    }
    cov /= nf;
    var_w /= nf;
    var_e /= nf;
    let correlation = SMatrix::<f64, R, C>::from_fn(|i, j| {
        let d = (var_w[i] * var_e[j]).sqrt();
        if d > 0.0 {
            cov[(i, j)] / d
        } else {
            0.0
        }
    });
    Ok(CrossCorrelation {
        covariance: cov,
        correlation,
        band: SIGNIFICANCE_SIGMAS / nf.sqrt(),
        samples: n,
    })
}
