//! Doppler velocity log beam model.
//!
//! A DVL measures the projection of the vehicle velocity onto each of its
//! four acoustic beams. Each beam is tilted by `pitch` from the body vertical
//! axis and rotated by its own `yaw` about that axis, so beam `i` has the unit
//! direction `[cos(yaw_i) sin(pitch), sin(yaw_i) sin(pitch), cos(pitch)]`.

use nalgebra::{DMatrix, DVector, Matrix4x3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio between the largest and smallest singular value of the active
/// direction matrix above which a least-squares solve is refused.
pub const MAX_CONDITION_NUMBER: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DvlError {
    #[error("beam pitch angle {0} rad must lie strictly between 0 and pi/2")]
    InvalidPitch(f64),
    #[error("only {0} valid beams, at least 3 are needed to resolve a 3-D velocity")]
    Unobservable(usize),
    #[error("beam geometry is degenerate (condition number {0:.3e})")]
    DegenerateGeometry(f64),
    #[error("beam noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("non-finite beam velocity")]
    NonFinite,
}

/// Beam layout of a four-beam DVL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pitch: f64,
    yaws: [f64; 4],
    #[serde(skip, default = "Matrix4x3::zeros")]
    directions: Matrix4x3<f64>,
}

impl BeamGeometry {
    pub fn new(pitch: f64, yaws: [f64; 4]) -> Result<Self, DvlError> {
        if !(pitch > 0.0 && pitch < std::f64::consts::FRAC_PI_2) {
            return Err(DvlError::InvalidPitch(pitch));
        }
        let (sp, cp) = pitch.sin_cos();
        let mut directions = Matrix4x3::zeros();
        for (i, yaw) in yaws.iter().enumerate() {
            let (sy, cy) = yaw.sin_cos();
            directions[(i, 0)] = cy * sp;
            directions[(i, 1)] = sy * sp;
            directions[(i, 2)] = cp;
        }
        Ok(Self {
            pitch,
            yaws,
            directions,
        })
    }

    /// Janus-X layout: 20 degrees from vertical, beams at 45/135/225/315 degrees.
    pub fn janus_default() -> Self {
        Self::from_degrees(20.0, [45.0, 135.0, 225.0, 315.0]).expect("default geometry is valid")
    }

    pub fn from_degrees(pitch_deg: f64, yaws_deg: [f64; 4]) -> Result<Self, DvlError> {
        Self::new(pitch_deg.to_radians(), yaws_deg.map(f64::to_radians))
    }

    /// Rebuilds the direction matrix after deserialization.
    pub fn rebuilt(self) -> Result<Self, DvlError> {
        Self::new(self.pitch, self.yaws)
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaws(&self) -> [f64; 4] {
        self.yaws
    }

    /// Rows are the unit beam directions in the body frame.
    pub fn direction_matrix(&self) -> &Matrix4x3<f64> {
        &self.directions
    }

    /// Forward model: along-beam velocities of a body-frame velocity.
    pub fn beams_from_velocity(&self, v_body: &Vector3<f64>) -> Vector4<f64> {
        self.directions * v_body
    }

    /// Least-squares body velocity from the valid beams.
    ///
    /// Invalid beams are dropped row-wise; the remaining system is solved
    /// through its singular value decomposition.
    pub fn ls_velocity(&self, beams: &DvlBeams) -> Result<Vector3<f64>, DvlError> {
        if beams.beams.iter().any(|b| !b.is_finite()) {
            return Err(DvlError::NonFinite);
        }
        let rows: Vec<usize> = (0..4).filter(|&i| beams.valid[i]).collect();
        if rows.len() < 3 {
            return Err(DvlError::Unobservable(rows.len()));
        }
        let h = DMatrix::from_fn(rows.len(), 3, |r, c| self.directions[(rows[r], c)]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| beams.beams[i]));
        let sv = h.singular_values();
        let cond = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
        if cond > MAX_CONDITION_NUMBER {
            return Err(DvlError::DegenerateGeometry(cond));
        }
        // Householder QR is accurate to rounding; the iterative SVD is not.
        let qr = h.qr();
        let x = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * y))
            .ok_or(DvlError::DegenerateGeometry(cond))?;
        Ok(Vector3::new(x[0], x[1], x[2]))
    }

    /// Covariance of the least-squares velocity for i.i.d. beam noise `sigma`
    /// with all four beams valid: `sigma^2 (H^T H)^-1`.
    pub fn ls_covariance(&self, sigma: f64) -> nalgebra::Matrix3<f64> {
        let hth = self.directions.transpose() * self.directions;
        hth.try_inverse().expect("full-rank geometry") * (sigma * sigma)
    }

    /// Least-squares covariance using only the valid beams.
    pub fn ls_covariance_masked(&self, valid: &[bool; 4], sigma: f64) -> Result<nalgebra::Matrix3<f64>, DvlError> {
        let mut hth = nalgebra::Matrix3::zeros();
        let mut used = 0;
        for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
            let row = self.directions.row(i);
            hth += row.transpose() * row;
            used += 1;
        }
        if used < 3 {
            return Err(DvlError::Unobservable(used));
        }
        hth.try_inverse()
            .map(|inv| inv * (sigma * sigma))
            .ok_or(DvlError::DegenerateGeometry(f64::INFINITY))
    }
}

/// One DVL epoch: four along-beam velocities and their validity flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvlBeams {
    pub time: f64,
    pub beams: Vector4<f64>,
    pub valid: [bool; 4],
}

impl DvlBeams {
    pub fn all_valid(time: f64, beams: Vector4<f64>) -> Self {
        Self {
            time,
            beams,
            valid: [true; 4],
        }
    }
}

/// Per-beam error model applied on top of the true along-beam velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamCorruption {
    pub bias: [f64; 4],
    pub scale: [f64; 4],
    pub sigma: f64,
}

impl BeamCorruption {
    pub fn white(sigma: f64) -> Self {
        Self {
            bias: [0.0; 4],
            scale: [1.0; 4],
            sigma,
        }
    }
}

impl Default for BeamCorruption {
    fn default() -> Self {
        Self::white(0.0)
    }
}

/// Returns `scale .* true_beams + bias + n` with `n ~ N(0, sigma^2 I)`.
pub fn corrupt_beams<R: Rng + ?Sized>(
    true_beams: &Vector4<f64>,
    corruption: &BeamCorruption,
    rng: &mut R,
) -> Result<Vector4<f64>, DvlError> {
    if !(corruption.sigma >= 0.0) {
        return Err(DvlError::NegativeSigma(corruption.sigma));
    }
    Ok(Vector4::from_fn(|i, _| {
        let n: f64 = StandardNormal.sample(rng);
        corruption.scale[i] * true_beams[i] + corruption.bias[i] + corruption.sigma * n
    }))
}
