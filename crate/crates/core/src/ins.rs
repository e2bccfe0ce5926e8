//! Strapdown inertial mechanization in a local-level North/East/Down frame.
//!
//! Flat Earth, constant gravity, no Earth rate or transport rate. Each IMU
//! sample covers the interval ending at its timestamp and is integrated with
//! a single fixed step: attitude by the exact exponential of the
//! bias-compensated rate, velocity with the mid-step attitude, position with
//! the trapezoidal rule.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

pub const STANDARD_GRAVITY: f64 = 9.80665;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InsError {
    #[error("integration step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("single-step rotation of {0} rad exceeds half a turn")]
    RotationTooLarge(f64),
    #[error("non-finite navigation state after propagation")]
    NonFinite,
}

/// Full navigation solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub time: f64,
    /// N/E/D, meters.
    pub position: Vector3<f64>,
    /// N/E/D, m/s.
    pub velocity: Vector3<f64>,
    /// Body-to-navigation rotation.
    pub attitude: UnitQuaternion<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl NavState {
    pub fn at_rest(time: f64) -> Self {
        Self {
            time,
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.attitude.coords.iter().all(|x| x.is_finite())
            && self.accel_bias.iter().all(|x| x.is_finite())
            && self.gyro_bias.iter().all(|x| x.is_finite())
    }

    /// Velocity resolved in the body frame.
    pub fn body_velocity(&self) -> Vector3<f64> {
        self.attitude.inverse_transform_vector(&self.velocity)
    }
}

/// Raw IMU record: specific force and angular rate, both in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    pub specific_force: Vector3<f64>,
    pub angular_rate: Vector3<f64>,
}

fn check_step(dt: f64) -> Result<(), InsError> {
    if dt > 0.0 {
        Ok(())
    } else {
        Err(InsError::NonPositiveStep(dt))
    }
}

/// Right-multiplies `attitude` by `exp([angular_rate * dt]x)`.
pub fn attitude_update(
    attitude: &UnitQuaternion<f64>,
    angular_rate: &Vector3<f64>,
    dt: f64,
) -> Result<UnitQuaternion<f64>, InsError> {
    check_step(dt)?;
    let angle = angular_rate.norm() * dt;
    if angle >= std::f64::consts::PI {
        return Err(InsError::RotationTooLarge(angle));
    }
    let q = attitude * UnitQuaternion::from_scaled_axis(angular_rate * dt);
    Ok(UnitQuaternion::new_normalize(q.into_inner()))
}

/// `v + (C_b^n f + g_n) dt` with `g_n = [0, 0, gravity]`.
pub fn velocity_update(
    velocity: &Vector3<f64>,
    attitude: &UnitQuaternion<f64>,
    specific_force: &Vector3<f64>,
    dt: f64,
    gravity: f64,
) -> Result<Vector3<f64>, InsError> {
    check_step(dt)?;
    Ok(velocity + (attitude * specific_force + Vector3::new(0.0, 0.0, gravity)) * dt)
}

/// Attitude halfway through a step with constant body rate.
pub fn mid_attitude(attitude: &UnitQuaternion<f64>, rate: &Vector3<f64>, dt: f64) -> UnitQuaternion<f64> {
    attitude * UnitQuaternion::from_scaled_axis(rate * (0.5 * dt))
}

/// Fixed-gravity strapdown integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strapdown {
    pub gravity: f64,
}

impl Default for Strapdown {
    fn default() -> Self {
        Self {
            gravity: STANDARD_GRAVITY,
        }
    }
}

impl Strapdown {
    pub fn new(gravity: f64) -> Self {
        Self { gravity }
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    /// Advances `state` by one IMU sample.
    pub fn propagate(&self, state: &NavState, sample: &ImuSample, dt: f64) -> Result<NavState, InsError> {
        check_step(dt)?;
        let rate = sample.angular_rate - state.gyro_bias;
        let force = sample.specific_force - state.accel_bias;
        let attitude = attitude_update(&state.attitude, &rate, dt)?;
        let mid = mid_attitude(&state.attitude, &rate, dt);
        let velocity = velocity_update(&state.velocity, &mid, &force, dt, self.gravity)?;
        let position = state.position + (state.velocity + velocity) * (0.5 * dt);
        let next = NavState {
            time: state.time + dt,
            position,
            velocity,
            attitude,
            accel_bias: state.accel_bias,
            gyro_bias: state.gyro_bias,
        };
        if next.is_finite() {
            Ok(next)
        } else {
            Err(InsError::NonFinite)
        }
    }
}
