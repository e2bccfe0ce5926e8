//! BeamsNet: a two-branch 1-D convolutional network mapping an IMU window and
//! the DVL velocity into a refined body-frame velocity.
//!
//! ```text
//! accel (T x 3) -> conv 6@2 -> ReLU -+
//!                                    +-> concat -> dropout -> dense.. -> [h, dvl] -> head -> v
//! gyro  (T x 3) -> conv 6@2 -> ReLU -+
//! ```
//!
//! Each branch treats the three axes as input channels and convolves over
//! time (stride 1, no padding), so a branch emits `6 (T - 1)` features. The
//! head sees the last hidden layer concatenated with the current DVL
//! velocity and, optionally, the previous `dvl_history` DVL velocities.

mod network;
mod train;


use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dvl::{BeamGeometry, DvlBeams, DvlError};
use crate::ins::ImuSample;
use crate::rng::seeded;

pub use network::{backward, loss_mse, BatchOutput};
pub use train::{resume, train, EpochRecord, Sample, TrainConfig, TrainHistory, TrainOutcome};

pub const FORMAT_TAG: &str = "beamsnet-params-v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamsNetError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset has {len} samples, need at least {min}")]
    DatasetTooSmall { len: usize, min: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("warming up: {have} of {need} {what} buffered")]
    WarmUp {
        what: &'static str,
        have: usize,
        need: usize,
    },
    #[error("input window is not contiguous: {0}")]
    Window(String),
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("parameter archive: {0}")]
    Format(String),
    #[error(transparent)]
    Dvl(#[from] DvlError),
}

pub type Result<T> = std::result::Result<T, BeamsNetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// IMU samples per window.
    pub window: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Past DVL epochs fed to the head besides the current one.
    pub dvl_history: usize,
    /// Feed the four raw beams to the head instead of the LS velocity.
    pub raw_beams_head: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            window: 100,
            filters: 6,
            kernel: 2,
            hidden: vec![512, 64],
            dropout: 0.2,
            dvl_history: 4,
            raw_beams_head: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BeamsNetError::InvalidConfig(m));
        if self.kernel == 0 || self.window < self.kernel {
            return bad(format!("window {} shorter than kernel {}", self.window, self.kernel));
        }
        if self.filters == 0 || self.hidden.iter().any(|&h| h == 0) {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn conv_out_len(&self) -> usize {
        self.window + 1 - self.kernel
    }

    pub fn branch_features(&self) -> usize {
        self.filters * self.conv_out_len()
    }

    /// Values per DVL epoch in the head input.
    pub fn dvl_unit(&self) -> usize {
        if self.raw_beams_head {
            4
        } else {
            3
        }
    }

    pub fn head_dvl_dim(&self) -> usize {
        self.dvl_unit() * (1 + self.dvl_history)
    }
}

/// One network input: IMU windows ending at a DVL epoch plus the head's DVL
/// values (current epoch first, then older epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedInput {
    pub accel: Vec<Vector3<f64>>,
    pub gyro: Vec<Vector3<f64>>,
    pub dvl: Vec<f64>,
}

impl WindowedInput {
    /// Builds the input from the last `T` IMU samples and DVL epochs ordered
    /// oldest to newest.
    pub fn assemble(config: &NetConfig, imu: &[ImuSample], dvl: &[DvlBeams], geom: &BeamGeometry) -> Result<Self> {
        let t = config.window;
        if imu.len() < t {
            return Err(BeamsNetError::WarmUp {
                what: "IMU samples",
                have: imu.len(),
                need: t,
            });
        }
        let need = config.dvl_history + 1;
        if dvl.len() < need {
            return Err(BeamsNetError::WarmUp {
                what: "DVL epochs",
                have: dvl.len(),
                need,
            });
        }
        let window = &imu[imu.len() - t..];
        check_contiguous(window)?;
        let mut values = Vec::with_capacity(config.head_dvl_dim());
        for epoch in dvl.iter().rev().take(need) {
            if config.raw_beams_head {
                values.extend(epoch.beams.iter());
            } else {
                values.extend(geom.ls_velocity(epoch)?.iter());
            }
        }
        Ok(Self {
            accel: window.iter().map(|s| s.specific_force).collect(),
            gyro: window.iter().map(|s| s.angular_rate).collect(),
            dvl: values,
        })
    }

    pub fn check_shape(&self, config: &NetConfig) -> Result<()> {
        let check = |layer: &str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(BeamsNetError::ShapeMismatch {
                    layer: layer.into(),
                    expected,
                    got,
                })
            }
        };
        check("conv_accel", config.window, self.accel.len())?;
        check("conv_gyro", config.window, self.gyro.len())?;
        check("head", config.head_dvl_dim(), self.dvl.len())
    }

    /// Current-epoch DVL velocity as seen by the head.
    pub fn current_velocity(&self) -> Vector3<f64> {
        Vector3::new(self.dvl[0], self.dvl[1], self.dvl[2])
    }
}

fn check_contiguous(window: &[ImuSample]) -> Result<()> {
    if window.len() < 2 {
        return Ok(());
    }
    let span = window[window.len() - 1].time - window[0].time;
    let nominal = span / (window.len() - 1) as f64;
    for (i, w) in window.windows(2).enumerate() {
        let dt = w[1].time - w[0].time;
        if !(dt > 0.0) || dt > 1.5 * nominal {
            return Err(BeamsNetError::Window(format!("step {dt} s after sample {i}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Indexed `(f * channels + c) * kernel + k`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Per-channel affine normalization of the IMU windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub accel_mean: [f64; 3],
    pub accel_std: [f64; 3],
    pub gyro_mean: [f64; 3],
    pub gyro_std: [f64; 3],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            accel_mean: [0.0; 3],
            accel_std: [1.0; 3],
            gyro_mean: [0.0; 3],
            gyro_std: [1.0; 3],
        }
    }
}

impl Standardizer {
    /// Channel statistics over every sample of every window.
    pub fn fit<'a>(inputs: impl Iterator<Item = &'a WindowedInput>) -> Self {
        let mut n = 0.0;
        let (mut sa, mut sa2, mut sg, mut sg2) = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
        for input in inputs {
            for (a, g) in input.accel.iter().zip(&input.gyro) {
                sa += a;
                sa2 += a.component_mul(a);
                sg += g;
                sg2 += g.component_mul(g);
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let stats = |s: Vector3<f64>, s2: Vector3<f64>| {
            let m = s / n;
            let var = s2 / n - m.component_mul(&m);
            let sd = var.map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
            ([m.x, m.y, m.z], [sd.x, sd.y, sd.z])
        };
        let (accel_mean, accel_std) = stats(sa, sa2);
        let (gyro_mean, gyro_std) = stats(sg, sg2);
        Self {
            accel_mean,
            accel_std,
            gyro_mean,
            gyro_std,
        }
    }
}

/// Trainable parameters plus everything needed to reproduce inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub conv_accel: Conv1d,
    pub conv_gyro: Conv1d,
    pub fc_stack: Vec<Dense>,
    pub head: Dense,
    pub norm: Standardizer,
    /// Per-axis RMS of the validation residuals, m/s.
    pub residual_sigma: [f64; 3],
    pub train_seed: u64,
}

impl NetworkParams {
    /// He-initialized network whose head starts as the DVL least-squares
    /// solution, so the untrained net reproduces the LS velocity.
    pub fn init(config: &NetConfig, norm: Standardizer, geom: &BeamGeometry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let conv = |rng: &mut crate::rng::SimRng| {
            let fan_in = 3 * config.kernel;
            Conv1d {
                filters: config.filters,
                channels: 3,
                kernel: config.kernel,
                weights: he(rng, fan_in, config.filters * fan_in),
                bias: vec![0.0; config.filters],
            }
        };
        let conv_accel = conv(&mut rng);
        let conv_gyro = conv(&mut rng);
        let mut fan_in = 2 * config.branch_features();
        let mut fc_stack = Vec::with_capacity(config.hidden.len());
        for &width in &config.hidden {
            fc_stack.push(Dense {
                weights: DMatrix::from_vec(width, fan_in, he(&mut rng, fan_in, width * fan_in)),
                bias: DVector::zeros(width),
                activation: Activation::Relu,
            });
            fan_in = width;
        }
        let dvl_dim = config.head_dvl_dim();
        let mut head_w = DMatrix::zeros(3, fan_in + dvl_dim);
        let small = Normal::new(0.0, 0.01 / (fan_in as f64).sqrt()).expect("valid sigma");
        for j in 0..fan_in {
            for i in 0..3 {
                head_w[(i, j)] = small.sample(&mut rng);
            }
        }
        let prior = if config.raw_beams_head {
            let h = geom.direction_matrix();
            let hth = h.transpose() * h;
            let pinv = hth.try_inverse().ok_or(DvlError::Unobservable(4))? * h.transpose();
            DMatrix::from_fn(3, 4, |i, j| pinv[(i, j)])
        } else {
            DMatrix::identity(3, 3)
        };
        head_w
            .view_mut((0, fan_in), (3, prior.ncols()))
            .copy_from(&prior);
        Ok(Self {
            config: config.clone(),
            conv_accel,
            conv_gyro,
            fc_stack,
            head: Dense {
                weights: head_w,
                bias: DVector::zeros(3),
                activation: Activation::Linear,
            },
            norm,
            residual_sigma: [0.0; 3],
            train_seed: seed,
        })
    }

    /// Checks that layer shapes chain and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let mismatch = |layer: String, expected: usize, got: usize| {
            Err(BeamsNetError::ShapeMismatch { layer, expected, got })
        };
        for (name, conv) in [("conv_accel", &self.conv_accel), ("conv_gyro", &self.conv_gyro)] {
            if conv.filters != c.filters || conv.kernel != c.kernel || conv.channels != 3 {
                return mismatch(name.into(), c.filters, conv.filters);
            }
            if conv.weights.len() != c.filters * 3 * c.kernel || conv.bias.len() != c.filters {
                return mismatch(name.into(), c.filters * 3 * c.kernel, conv.weights.len());
            }
        }
        if self.fc_stack.len() != c.hidden.len() {
            return mismatch("fc_stack".into(), c.hidden.len(), self.fc_stack.len());
        }
        let mut width = 2 * c.branch_features();
        for (i, d) in self.fc_stack.iter().enumerate() {
            if d.inputs() != width {
                return mismatch(format!("fc_stack[{i}]"), width, d.inputs());
            }
            if d.outputs() != c.hidden[i] || d.bias.len() != d.outputs() {
                return mismatch(format!("fc_stack[{i}]"), c.hidden[i], d.outputs());
            }
            width = d.outputs();
        }
        if self.head.inputs() != width + c.head_dvl_dim() {
            return mismatch("head".into(), width + c.head_dvl_dim(), self.head.inputs());
        }
        if self.head.outputs() != 3 || self.head.bias.len() != 3 {
            return mismatch("head".into(), 3, self.head.outputs());
        }
        for (name, t) in self.named_tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(BeamsNetError::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same shapes, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.conv_accel.weights,
            &self.conv_accel.bias,
            &self.conv_gyro.weights,
            &self.conv_gyro.bias,
        ];
        for d in self.fc_stack.iter().chain(std::iter::once(&self.head)) {
            out.push(d.weights.as_slice());
            out.push(d.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.conv_accel.weights,
            &mut self.conv_accel.bias,
            &mut self.conv_gyro.weights,
            &mut self.conv_gyro.bias,
        ];
        for d in self.fc_stack.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(d.weights.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut names = vec![
            "conv_accel.weights".to_string(),
            "conv_accel.bias".into(),
            "conv_gyro.weights".into(),
            "conv_gyro.bias".into(),
        ];
        for i in 0..self.fc_stack.len() {
            names.push(format!("fc_stack[{i}].weights"));
            names.push(format!("fc_stack[{i}].bias"));
        }
        names.push("head.weights".into());
        names.push("head.bias".into());
        names.into_iter().zip(self.tensors()).collect()
    }

    /// Diagonal measurement covariance from the validation residuals.
    pub fn effective_covariance(&self) -> Matrix3<f64> {
        let s = Vector3::from(self.residual_sigma);
        Matrix3::from_diagonal(&s.component_mul(&s))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Archive {
            format: FORMAT_TAG.into(),
            params: self.clone(),
        })
        .expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let archive: Archive = serde_json::from_str(text).map_err(|e| BeamsNetError::Format(e.to_string()))?;
        if archive.format != FORMAT_TAG {
            return Err(BeamsNetError::Format(format!("unknown format tag {:?}", archive.format)));
        }
        archive.params.validate()?;
        Ok(archive.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    params: NetworkParams,
}

fn he<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, count: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sigma");
    (0..count).map(|_| dist.sample(rng)).collect()
}

/// Velocity measurement from the network at the latest DVL epoch.
///
/// `imu` must end at the epoch of the last element of `dvl`. Returns
/// [`BeamsNetError::WarmUp`] until enough history has accrued; callers fall
/// back to least squares in that case.
pub fn infer_measurement(
    params: &NetworkParams,
    imu: &[ImuSample],
    dvl: &[DvlBeams],
    geom: &BeamGeometry,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let input = WindowedInput::assemble(&params.config, imu, dvl, geom)?;
    if let (Some(last_imu), Some(last_dvl)) = (imu.last(), dvl.last()) {
        if (last_imu.time - last_dvl.time).abs() > 1e-6 {
            return Err(BeamsNetError::Window(format!(
                "IMU buffer ends at {} s, DVL epoch at {} s",
                last_imu.time, last_dvl.time
            )));
        }
    }
    let v = params.forward(&input, false, 0)?;
    Ok((v, params.effective_covariance()))
}
