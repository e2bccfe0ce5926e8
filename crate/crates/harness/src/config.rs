//! Flat experiment configuration. Every physical quantity carries its unit in
//! the key name, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use navfuse::beamsnet::{NetConfig, TrainConfig};
use navfuse::dvl::BeamGeometry;
use navfuse::ekf::{CrossCovSupport, FilterConfig, InitialUncertainty, NoiseModel};
use navfuse::experiments::ScenarioConfig;
use navfuse::ins::STANDARD_GRAVITY;
use navfuse::sim::{TrajectoryKind, TrajectoryProfile};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Source of the velocity measurements fed to the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementMode {
    LeastSquares,
    Beamsnet,
    /// Navigation-frame synthetic velocities whose error has exactly the
    /// modelled cross-covariance with the IMU noise.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trajectory: TrajectoryKind,
    pub speed_mps: f64,
    pub duration_s: f64,
    pub leg_length_m: f64,
    pub turn_rate_radps: f64,
    pub heading_period_s: f64,
    pub speed_variation_mps: f64,
    pub speed_period_s: f64,
    pub heave_rate_mps: f64,
    pub sway_amplitude_mps: f64,
    pub sway_period_s: f64,
    pub wobble_amplitude_rad: f64,
    pub wobble_period_s: f64,
    pub initial_heading_rad: f64,

    pub imu_rate_hz: f64,
    pub dvl_rate_hz: f64,
    pub accel_noise_mps2: f64,
    pub gyro_noise_radps: f64,
    pub accel_bias_rw_mps2: f64,
    pub gyro_bias_rw_radps: f64,
    pub dvl_sigma_mps: f64,
    pub beam_pitch_deg: f64,
    pub beam_bias_mps: [f64; 4],
    pub beam_scale: [f64; 4],

    /// One-sigma initial uncertainties; the true initial biases are drawn
    /// with the same spreads.
    pub init_velocity_sigma_mps: f64,
    pub init_tilt_sigma_rad: f64,
    pub init_heading_sigma_rad: f64,
    pub init_accel_bias_sigma_mps2: f64,
    pub init_gyro_bias_sigma_radps: f64,
    pub perturb_initial: bool,

    pub rho: f64,
    pub use_cross_correlation: bool,
    pub cross_cov_support: CrossCovSupport,
    pub limit_cross_cov: bool,
    /// Epoch lag at which measurement error and IMU noise are paired in the
    /// reported cross-correlation; 1 pairs each interval with the epoch that
    /// closes it.
    pub correlation_lag_epochs: i64,
    pub measurement: MeasurementMode,
    pub matched_sigma_mps: f64,
    /// Parameter archive for `measurement = "beamsnet"`; `"train"` trains a
    /// network from the corpus settings first.
    pub beamsnet_params: String,
    pub seeds: Vec<u64>,
    /// Output root; empty defers to `NAVFUSE_OUT`.
    pub output_dir: String,

    pub corpus_trajectories: usize,
    pub corpus_duration_s: f64,
    pub window_samples: usize,
    pub dvl_history: usize,
    pub hidden_units: Vec<usize>,
    pub dropout: f64,
    pub raw_beams_head: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub weight_decay: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = TrajectoryProfile::default();
        let n = NoiseModel::default();
        let init = InitialUncertainty::default();
        let net = NetConfig::default();
        let train = TrainConfig::default();
        Self {
            trajectory: p.kind,
            speed_mps: p.speed,
            duration_s: p.duration,
            leg_length_m: p.leg_length,
            turn_rate_radps: p.turn_rate,
            heading_period_s: p.heading_period,
            speed_variation_mps: p.speed_variation,
            speed_period_s: p.speed_period,
            heave_rate_mps: p.heave_rate,
            sway_amplitude_mps: p.sway_amplitude,
            sway_period_s: p.sway_period,
            wobble_amplitude_rad: p.wobble_amplitude,
            wobble_period_s: p.wobble_period,
            initial_heading_rad: p.initial_heading,
            imu_rate_hz: 100.0,
            dvl_rate_hz: 1.0,
            accel_noise_mps2: n.accel_noise,
            gyro_noise_radps: n.gyro_noise,
            accel_bias_rw_mps2: n.accel_bias_rw,
            gyro_bias_rw_radps: n.gyro_bias_rw,
            dvl_sigma_mps: n.dvl_meas_sigma,
            beam_pitch_deg: 20.0,
            beam_bias_mps: [0.0; 4],
            beam_scale: [1.0; 4],
            init_velocity_sigma_mps: init.velocity,
            init_tilt_sigma_rad: init.tilt,
            init_heading_sigma_rad: init.heading,
            init_accel_bias_sigma_mps2: init.accel_bias,
            init_gyro_bias_sigma_radps: init.gyro_bias,
            perturb_initial: true,
            rho: n.rho,
            use_cross_correlation: true,
            cross_cov_support: CrossCovSupport::NavNoise,
            limit_cross_cov: true,
            correlation_lag_epochs: 1,
            measurement: MeasurementMode::LeastSquares,
            matched_sigma_mps: 0.04,
            beamsnet_params: String::new(),
            seeds: vec![1],
            output_dir: String::new(),
            corpus_trajectories: 18,
            corpus_duration_s: 400.0,
            window_samples: net.window,
            dvl_history: net.dvl_history,
            hidden_units: net.hidden.clone(),
            dropout: net.dropout,
            raw_beams_head: net.raw_beams_head,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            validation_fraction: train.validation_fraction,
            weight_decay: train.weight_decay,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} must lie in [0, 1]", self.rho));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.measurement == MeasurementMode::Beamsnet && self.beamsnet_params.is_empty() {
            return bad("measurement = \"beamsnet\" needs beamsnet_params (a path or \"train\")".into());
        }
        if !self.beamsnet_params.is_empty() && self.beamsnet_params != "train" && !Path::new(&self.beamsnet_params).exists()
        {
            return bad(format!("beamsnet_params {} does not exist", self.beamsnet_params));
        }
        if !(self.matched_sigma_mps > 0.0) {
            return bad("matched_sigma_mps must be positive".into());
        }
        self.profile().validate()?;
        self.noise().validate()?;
        self.net_config().validate()?;
        self.train_config(0).validate()?;
        self.geometry()?;
        Ok(())
    }

    pub fn beamsnet_params_path(&self) -> Option<PathBuf> {
        match self.beamsnet_params.as_str() {
            "" | "train" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    pub fn profile(&self) -> TrajectoryProfile {
        TrajectoryProfile {
            kind: self.trajectory,
            speed: self.speed_mps,
            duration: self.duration_s,
            leg_length: self.leg_length_m,
            turn_rate: self.turn_rate_radps,
            heading_period: self.heading_period_s,
            speed_variation: self.speed_variation_mps,
            speed_period: self.speed_period_s,
            heave_rate: self.heave_rate_mps,
            sway_amplitude: self.sway_amplitude_mps,
            sway_period: self.sway_period_s,
            wobble_amplitude: self.wobble_amplitude_rad,
            wobble_period: self.wobble_period_s,
            initial_heading: self.initial_heading_rad,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            accel_noise: self.accel_noise_mps2,
            gyro_noise: self.gyro_noise_radps,
            accel_bias_rw: self.accel_bias_rw_mps2,
            gyro_bias_rw: self.gyro_bias_rw_radps,
            dvl_meas_sigma: self.dvl_sigma_mps,
            rho: self.rho,
        }
    }

    pub fn geometry(&self) -> Result<BeamGeometry> {
        BeamGeometry::from_degrees(self.beam_pitch_deg, [45.0, 135.0, 225.0, 315.0]).map_err(HarnessError::from)
    }

    pub fn initial(&self) -> InitialUncertainty {
        InitialUncertainty {
            velocity: self.init_velocity_sigma_mps,
            tilt: self.init_tilt_sigma_rad,
            heading: self.init_heading_sigma_rad,
            accel_bias: self.init_accel_bias_sigma_mps2,
            gyro_bias: self.init_gyro_bias_sigma_radps,
        }
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        Ok(ScenarioConfig {
            profile: self.profile(),
            imu_rate: self.imu_rate_hz,
            dvl_rate: self.dvl_rate_hz,
            gravity: STANDARD_GRAVITY,
            noise: self.noise(),
            geometry: self.geometry()?,
            beam_bias: self.beam_bias_mps,
            beam_scale: self.beam_scale,
            initial: self.initial(),
        })
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            use_cross_correlation: self.use_cross_correlation,
            support: self.cross_cov_support,
            limit_cross_cov: self.limit_cross_cov,
            initial: self.initial(),
            ..FilterConfig::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            window: self.window_samples,
            hidden: self.hidden_units.clone(),
            dropout: self.dropout,
            dvl_history: self.dvl_history,
            raw_beams_head: self.raw_beams_head,
            ..NetConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            weight_decay: self.weight_decay,
            ..TrainConfig::default()
        }
    }
}
