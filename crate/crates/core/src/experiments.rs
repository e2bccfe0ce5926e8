//! Scenario simulation and the paired / Monte Carlo filter experiments built
//! on top of it.

use nalgebra::{Cholesky, Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamsnet::{self, BeamsNetError, NetConfig, NetworkParams, Sample, WindowedInput};
use crate::dvl::{BeamCorruption, BeamGeometry, DvlBeams, DvlError};
use crate::ekf::{
    build_state_cross_cov, fuse_run, CrossCovSupport, EkfError, FilterConfig, FilterRun,
    InitialUncertainty, MeasurementFrame, MeasurementSource, NoiseModel, VelocityMeasurement,
};
use crate::ins::{ImuSample, InsError, NavState, STANDARD_GRAVITY};

/// Largest gap between a DVL time stamp and the IMU sample it is matched to, s.
pub const IMU_MATCH_TOL: f64 = 1e-6;
use crate::metrics::MetricError;
use crate::rng::{substream, SimRng};
use crate::sim::{self, DvlLog, ImuNoiseLog, SensorTruth, SimError, TrajectoryKind, TrajectoryProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dvl(#[from] DvlError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Ins(#[from] InsError),
    #[error(transparent)]
    BeamsNet(#[from] BeamsNetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("rho {rho} exceeds the largest jointly valid correlation {max:.4} at t = {time} s")]
    InvalidCorrelation { rho: f64, max: f64, time: f64 },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub profile: TrajectoryProfile,
    pub imu_rate: f64,
    pub dvl_rate: f64,
    pub gravity: f64,
    pub noise: NoiseModel,
    pub geometry: BeamGeometry,
    pub beam_bias: [f64; 4],
    pub beam_scale: [f64; 4],
    /// Spread of the true initial biases and of the initial navigation error.
    pub initial: InitialUncertainty,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            profile: TrajectoryProfile::default(),
            imu_rate: 100.0,
            dvl_rate: 1.0,
            gravity: STANDARD_GRAVITY,
            noise: NoiseModel::default(),
            geometry: BeamGeometry::janus_default(),
            beam_bias: [0.0; 4],
            beam_scale: [1.0; 4],
            initial: InitialUncertainty::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn beam_corruption(&self) -> BeamCorruption {
        BeamCorruption {
            bias: self.beam_bias,
            scale: self.beam_scale,
            sigma: self.noise.dvl_meas_sigma,
        }
    }

    /// Body-frame covariance of the least-squares velocity.
    pub fn ls_covariance(&self) -> Matrix3<f64> {
        self.geometry.ls_covariance(self.noise.dvl_meas_sigma)
    }
}

/// One simulated mission: truth, corrupted sensors and recorded noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub truth: SensorTruth,
    pub imu: Vec<ImuSample>,
    pub imu_noise: ImuNoiseLog,
    pub dvl: DvlLog,
    pub initial_accel_bias: Vector3<f64>,
    pub initial_gyro_bias: Vector3<f64>,
}

fn normal3(rng: &mut SimRng, sigma: Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| sigma[i] * rng.sample::<f64, _>(StandardNormal))
}

impl Scenario {
    pub fn simulate(config: &ScenarioConfig, seed: u64) -> Result<Self> {
        let truth = sim::generate(&config.profile, 1.0 / config.imu_rate, config.gravity)?;
        let mut bias_rng = substream(seed, 0);
        let ba = normal3(&mut bias_rng, Vector3::repeat(config.initial.accel_bias));
        let bg = normal3(&mut bias_rng, Vector3::repeat(config.initial.gyro_bias));
        let (imu, imu_noise) = sim::corrupt_imu(&truth, &config.noise, ba, bg, &mut substream(seed, 1))?;
        let dvl = sim::emit_dvl(
            &truth,
            &config.geometry,
            config.dvl_rate,
            &config.beam_corruption(),
            &mut substream(seed, 2),
        )?;
        Ok(Self {
            config: config.clone(),
            seed,
            truth,
            imu,
            imu_noise,
            dvl,
            initial_accel_bias: ba,
            initial_gyro_bias: bg,
        })
    }

    pub fn dt(&self) -> f64 {
        self.truth.dt
    }

    /// True navigation state, biases included, at truth index `k`.
    pub fn true_nav(&self, k: usize) -> NavState {
        let (ba, bg) = if k == 0 {
            (self.initial_accel_bias, self.initial_gyro_bias)
        } else {
            (self.imu_noise.accel_bias[k - 1], self.imu_noise.gyro_bias[k - 1])
        };
        self.truth.states[k].nav_state(ba, bg)
    }

    /// True states at every DVL epoch.
    pub fn truth_at_epochs(&self) -> Vec<NavState> {
        self.dvl.state_index.iter().map(|&k| self.true_nav(k)).collect()
    }

    /// Initial estimate: zero biases, and velocity and attitude errors drawn
    /// from the initial uncertainty when `perturb` is set.
    pub fn initial_estimate(&self, perturb: bool) -> NavState {
        let mut est = self.true_nav(0);
        est.accel_bias = Vector3::zeros();
        est.gyro_bias = Vector3::zeros();
        if perturb {
            let init = &self.config.initial;
            let mut rng = substream(self.seed, 3);
            let dv = normal3(&mut rng, Vector3::repeat(init.velocity));
            let psi = normal3(&mut rng, Vector3::new(init.tilt, init.tilt, init.heading));
            est.velocity -= dv;
            est.attitude = UnitQuaternion::from_scaled_axis(-psi) * est.attitude;
        }
        est
    }

    /// Least-squares DVL velocity at every epoch.
    pub fn ls_measurements(&self) -> Result<Vec<VelocityMeasurement>> {
        ls_measurements(&self.dvl.epochs, &self.config.geometry, self.config.noise.dvl_meas_sigma)
    }

    /// BeamsNet velocity at every epoch, least squares while warming up.
    pub fn beamsnet_measurements(&self, params: &NetworkParams) -> Result<Vec<VelocityMeasurement>> {
        beamsnet_measurements(
            params,
            &self.imu,
            &self.dvl.epochs,
            &self.config.geometry,
            self.config.noise.dvl_meas_sigma,
        )
    }

    /// Training samples at every epoch with a full window and DVL history.
    pub fn training_samples(&self, net: &NetConfig) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (j, &end) in self.dvl.state_index.iter().enumerate() {
            if end < net.window || j < net.dvl_history {
                continue;
            }
            let input = WindowedInput::assemble(net, &self.imu[..end], &self.dvl.epochs[..=j], &self.config.geometry)?;
            out.push(Sample {
                input,
                target: self.dvl.true_body_velocity[j],
            });
        }
        Ok(out)
    }

    /// Sum of the per-sample IMU process noise over the interval ending at
    /// each DVL epoch.
    pub fn interval_noise(&self) -> Vec<SVector<f64, 12>> {
        self.imu_noise.interval_sums(&self.dvl.imu_index())
    }

    /// Navigation-frame velocity measurements with covariance `sigma^2 I`
    /// whose error has exactly the correlation the aware filter assumes with
    /// the accelerometer and gyroscope white noise summed over each interval.
    pub fn matched_measurements(&self, rho: f64, sigma: f64) -> Result<Vec<VelocityMeasurement>> {
        let noise = NoiseModel {
            rho,
            ..self.config.noise
        };
        noise.validate()?;
        let q_step = noise.process_covariance();
        let r = Matrix3::identity() * (sigma * sigma);
        let mut rng = substream(self.seed, 4);
        let ends = self.dvl.imu_index();
        let sums = self.interval_noise();
        let mut out = Vec::with_capacity(self.dvl.epochs.len());
        let mut start = 0;
        for (j, (&end, w)) in ends.iter().zip(&sums).enumerate() {
            let steps = (end + 1 - start) as f64;
            start = end + 1;
            let time = self.dvl.epochs[j].time;
            let q_sum = q_step * steps;
            let m = build_state_cross_cov(&q_sum, &r, rho, CrossCovSupport::NavNoise)?;
            let qs: SMatrix<f64, 6, 6> = q_sum.fixed_view::<6, 6>(0, 0).into_owned();
            let ms: SMatrix<f64, 6, 3> = m.fixed_view::<6, 3>(0, 0).into_owned();
            let chol = Cholesky::new(qs).ok_or(EkfError::InvalidNoise("singular interval covariance".into()))?;
            let t = chol.solve(&ms).transpose();
            let cond_cov = r - t * ms;
            let cond = Cholesky::new((cond_cov + cond_cov.transpose()) * 0.5).ok_or_else(|| {
                ExperimentError::InvalidCorrelation {
                    rho,
                    max: max_joint_rho(&qs, &r),
                    time,
                }
            })?;
            let xi = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let e = t * w.fixed_rows::<6>(0) + cond.l() * xi;
            out.push(VelocityMeasurement {
                time,
                velocity: self.truth.states[self.dvl.state_index[j]].velocity + e,
                covariance: r,
                frame: MeasurementFrame::Navigation,
                source: MeasurementSource::Synthetic,
            });
        }
        Ok(out)
    }

    pub fn fuse(&self, measurements: &[VelocityMeasurement], noise: &NoiseModel, config: &FilterConfig, perturb: bool) -> Result<FilterRun> {
        Ok(fuse_run(
            &self.imu,
            measurements,
            self.initial_estimate(perturb),
            noise,
            config,
            self.seed,
        )?)
    }

    /// Aware and neglect runs over the same data.
    pub fn paired_runs(
        &self,
        measurements: &[VelocityMeasurement],
        noise: &NoiseModel,
        config: &FilterConfig,
        perturb: bool,
    ) -> Result<(FilterRun, FilterRun)> {
        let aware = FilterConfig {
            use_cross_correlation: true,
            ..*config
        };
        let neglect = FilterConfig {
            use_cross_correlation: false,
            ..*config
        };
        Ok((
            self.fuse(measurements, noise, &aware, perturb)?,
            self.fuse(measurements, noise, &neglect, perturb)?,
        ))
    }
}

/// Least-squares body velocity for every DVL epoch, with the covariance of
/// the beams actually used.
pub fn ls_measurements(epochs: &[DvlBeams], geom: &BeamGeometry, beam_sigma: f64) -> Result<Vec<VelocityMeasurement>> {
    epochs
        .iter()
        .map(|e| {
            let v = geom.ls_velocity(e)?;
            let r = geom.ls_covariance_masked(&e.valid, beam_sigma)?;
            Ok(VelocityMeasurement::body(e.time, v, r, MeasurementSource::LeastSquares))
        })
        .collect()
}

/// BeamsNet body velocity for every DVL epoch. Each epoch sees the IMU
/// samples up to and including the one stamped with its time; epochs without
/// a full window or DVL history fall back to least squares.
pub fn beamsnet_measurements(
    params: &NetworkParams,
    imu: &[ImuSample],
    epochs: &[DvlBeams],
    geom: &BeamGeometry,
    beam_sigma: f64,
) -> Result<Vec<VelocityMeasurement>> {
    let mut out = Vec::with_capacity(epochs.len());
    for (j, epoch) in epochs.iter().enumerate() {
        let end = imu.partition_point(|s| s.time < epoch.time - IMU_MATCH_TOL);
        let end = match imu.get(end) {
            Some(s) if (s.time - epoch.time).abs() <= IMU_MATCH_TOL => end + 1,
            _ => end,
        };
        match beamsnet::infer_measurement(params, &imu[..end], &epochs[..=j], geom) {
            Ok((v, r)) => out.push(VelocityMeasurement::body(epoch.time, v, r, MeasurementSource::BeamsNet)),
            Err(BeamsNetError::WarmUp { .. }) => {
                let v = geom.ls_velocity(epoch)?;
                let r = geom.ls_covariance_masked(&epoch.valid, beam_sigma)?;
                out.push(VelocityMeasurement::body(epoch.time, v, r, MeasurementSource::Fallback));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Largest `rho` for which the rank-one cross-covariance keeps the joint
/// covariance of the 6 navigation noise channels and the measurement PSD.
pub fn max_joint_rho(q: &SMatrix<f64, 6, 6>, r: &Matrix3<f64>) -> f64 {
    let corr_inv_sum = |d: Vec<f64>, inv: Option<Vec<f64>>, n: usize| -> f64 {
        let inv = match inv {
            Some(v) => v,
            None => return f64::INFINITY,
        };
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += d[i] * inv[i * n + j] * d[j];
            }
        }
        s
    };
    let dq: Vec<f64> = (0..6).map(|i| q[(i, i)].sqrt()).collect();
    let dr: Vec<f64> = (0..3).map(|i| r[(i, i)].sqrt()).collect();
    let qi = q.try_inverse().map(|m| m.transpose().as_slice().to_vec());
    let ri = r.try_inverse().map(|m| m.transpose().as_slice().to_vec());
    let c = corr_inv_sum(dq, qi, 6) * corr_inv_sum(dr, ri, 3);
    1.0 / c.sqrt()
}

/// Varied trajectories for a training corpus.
pub fn corpus_profiles(count: usize, duration: f64, seed: u64) -> Vec<TrajectoryProfile> {
    let mut rng = substream(seed, 10);
    let kinds = [
        TrajectoryKind::Straight,
        TrajectoryKind::Lawnmower,
        TrajectoryKind::SinusoidHeading,
        TrajectoryKind::Racetrack,
    ];
    (0..count)
        .map(|i| {
            let speed = rng.random_range(1.0..2.0);
            TrajectoryProfile {
                kind: kinds[i % kinds.len()],
                speed,
                duration,
                leg_length: rng.random_range(50.0..150.0),
                turn_rate: rng.random_range(0.05..0.15),
                heading_period: rng.random_range(40.0..120.0),
                speed_variation: rng.random_range(0.2..0.5_f64).min(0.5 * speed),
                speed_period: rng.random_range(15.0..40.0),
                heave_rate: rng.random_range(-0.1..0.1),
                sway_amplitude: rng.random_range(0.05..0.2),
                sway_period: rng.random_range(12.0..40.0),
                wobble_amplitude: 5e-4,
                wobble_period: rng.random_range(6.0..12.0),
                initial_heading: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// Scenario settings for BeamsNet corpora: a better-calibrated IMU so the
/// inertial window carries usable short-term velocity information.
pub fn corpus_scenario_config() -> ScenarioConfig {
    ScenarioConfig {
        initial: InitialUncertainty {
            accel_bias: 1e-3,
            gyro_bias: 1e-4,
            ..InitialUncertainty::default()
        },
        ..ScenarioConfig::default()
    }
}

/// Simulates one scenario per profile, seeded `seed, seed + 1, ...`.
pub fn simulate_corpus(base: &ScenarioConfig, profiles: &[TrajectoryProfile], seed: u64) -> Result<Vec<Scenario>> {
    let jobs: Vec<(u64, &TrajectoryProfile)> = profiles.iter().enumerate().map(|(i, p)| (seed + i as u64, p)).collect();
    jobs.par_iter()
        .map(|&(s, p)| {
            let cfg = ScenarioConfig {
                profile: *p,
                ..base.clone()
            };
            Scenario::simulate(&cfg, s)
        })
        .collect()
}

pub fn corpus_samples(scenarios: &[Scenario], net: &NetConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenarios {
        out.extend(s.training_samples(net)?);
    }
    Ok(out)
}

/// Paired truth, least-squares and BeamsNet body velocities at every epoch
/// past the warm-up.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VelocityComparison {
    pub truth: Vec<Vector3<f64>>,
    pub least_squares: Vec<Vector3<f64>>,
    pub beamsnet: Vec<Vector3<f64>>,
}

impl VelocityComparison {
    pub fn extend(&mut self, other: VelocityComparison) {
        self.truth.extend(other.truth);
        self.least_squares.extend(other.least_squares);
        self.beamsnet.extend(other.beamsnet);
    }
}

pub fn compare_velocities(params: &NetworkParams, scenario: &Scenario) -> Result<VelocityComparison> {
    let samples = scenario.training_samples(&params.config)?;
    let inputs: Vec<&WindowedInput> = samples.iter().map(|s| &s.input).collect();
    let net = params.predict_all(&inputs)?;
    let mut out = VelocityComparison::default();
    for (s, v) in samples.iter().zip(net) {
        out.truth.push(s.target);
        out.least_squares.push(if params.config.raw_beams_head {
            let b = nalgebra::Vector4::from_column_slice(&s.input.dvl[..4]);
            let e = crate::dvl::DvlBeams::all_valid(0.0, b);
            scenario.config.geometry.ls_velocity(&e)?
        } else {
            s.input.current_velocity()
        });
        out.beamsnet.push(v);
    }
    Ok(out)
}

/// Measurement errors and the IMU process noise aligned for a
/// cross-correlation study: `noise[j]` drives the state from epoch `j` to
/// `j + 1` and `error[j]` is the measurement error at epoch `j`, so the
/// one-step-lag convention is lag 1. Epochs before `first_epoch` are dropped.
pub fn noise_error_sequences(
    scenario: &Scenario,
    measurements: &[VelocityMeasurement],
    first_epoch: usize,
) -> (Vec<SVector<f64, 12>>, Vec<Vector3<f64>>) {
    let intervals = scenario.interval_noise();
    let n = measurements.len();
    let mut noise = Vec::new();
    let mut error = Vec::new();
    for j in first_epoch..n.saturating_sub(1) {
        noise.push(intervals[j + 1]);
        let m = &measurements[j];
        let truth = match m.frame {
            MeasurementFrame::Body => scenario.dvl.true_body_velocity[j],
            MeasurementFrame::Navigation => scenario.truth.states[scenario.dvl.state_index[j]].velocity,
        };
        error.push(m.velocity - truth);
    }
    (noise, error)
}

/// Runs `job` for every seed in parallel; results keep the seed order.
pub fn monte_carlo<T, F>(seeds: &[u64], job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| job(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::RunMode;
    use crate::ins::Strapdown;
    use crate::metrics::{nees, uncertainty_summary, StateGroup};

    fn short(duration: f64) -> ScenarioConfig {
        ScenarioConfig {
            profile: TrajectoryProfile {
                duration,
                ..TrajectoryProfile::default()
            },
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn scenario_is_deterministic() {
        let a = Scenario::simulate(&short(20.0), 7).unwrap();
        let b = Scenario::simulate(&short(20.0), 7).unwrap();
        assert_eq!(a, b);
        let c = Scenario::simulate(&short(20.0), 8).unwrap();
        assert_ne!(a.imu, c.imu);
        assert_eq!(a.dvl.epochs.len(), 20);
        assert_eq!(a.ls_measurements().unwrap().len(), 20);
    }

    #[test]
    fn initial_estimate_error_matches_draw() {
        let s = Scenario::simulate(&short(10.0), 3).unwrap();
        let est = s.initial_estimate(false);
        let e = crate::ekf::nav_error(&s.true_nav(0), &est);
        assert_eq!(e.fixed_rows::<6>(0).norm(), 0.0);
        assert_eq!(e.fixed_rows::<3>(6), s.initial_accel_bias);
        let est = s.initial_estimate(true);
        let e = crate::ekf::nav_error(&s.true_nav(0), &est);
        assert!(e.fixed_rows::<3>(3).norm() > 0.0 && e.fixed_rows::<3>(3).norm() < 0.2);
    }

    #[test]
    fn ls_fusion_tracks_truth() {
        let s = Scenario::simulate(&short(120.0), 11).unwrap();
        let meas = s.ls_measurements().unwrap();
        let run = s
            .fuse(&meas, &s.config.noise, &FilterConfig::default(), true)
            .unwrap();
        assert_eq!(run.tag.mode, RunMode::Aware);
        assert_eq!(run.updates.len(), 120);
        assert_eq!(run.psd_clamps, 0);
        let last = s.truth.states.len() - 1;
        let err = (run.final_nav().velocity - s.true_nav(last).velocity).norm();
        let ins = Strapdown::new(s.config.gravity);
        let mut free = s.initial_estimate(true);
        for sample in &s.imu {
            free = ins.propagate(&free, sample, s.dt()).unwrap();
        }
        let free_err = (free.velocity - s.true_nav(last).velocity).norm();
        assert!(err < 0.5 && err < 0.05 * free_err, "fused {err}, free {free_err}");
        let report = nees(&run, &s.truth_at_epochs()).unwrap();
        assert!(report.mean.is_finite());
    }

    #[test]
    fn matched_measurements_have_planted_statistics() {
        let mut cfg = short(400.0);
        cfg.noise.rho = 0.2;
        let s = Scenario::simulate(&cfg, 12).unwrap();
        let meas = s.matched_measurements(0.2, 0.03).unwrap();
        let errors: Vec<f64> = meas
            .iter()
            .enumerate()
            .flat_map(|(j, m)| {
                let v = s.truth.states[s.dvl.state_index[j]].velocity;
                (m.velocity - v).iter().copied().collect::<Vec<_>>()
            })
            .collect();
        let var = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        assert!((var.sqrt() / 0.03 - 1.0).abs() < 0.1, "{}", var.sqrt());
        assert!(matches!(
            s.matched_measurements(0.9, 0.03),
            Err(ExperimentError::InvalidCorrelation { .. })
        ));
    }

    #[test]
    fn rho_zero_pair_is_identical() {
        let mut cfg = short(60.0);
        cfg.noise.rho = 0.0;
        let s = Scenario::simulate(&cfg, 13).unwrap();
        let meas = s.ls_measurements().unwrap();
        let (aware, neglect) = s.paired_runs(&meas, &cfg.noise, &FilterConfig::default(), false).unwrap();
        assert_eq!(aware.rows, neglect.rows);
        let summary = uncertainty_summary(&aware, &neglect).unwrap();
        for g in StateGroup::ALL {
            assert_eq!(summary.group(g).mean_std_improvement_pct, 0.0);
        }
    }

    #[test]
    fn monte_carlo_preserves_seed_order() {
        let out = monte_carlo(&[5, 3, 9, 1], |s| Ok(s * 2)).unwrap();
        assert_eq!(out, vec![10, 6, 18, 2]);
    }

    #[test]
    fn joint_rho_bound_for_uncorrelated_channels() {
        let q = SMatrix::<f64, 6, 6>::identity() * 4.0;
        let r = Matrix3::identity() * 0.01;
        assert!((max_joint_rho(&q, &r) - 1.0 / 18f64.sqrt()).abs() < 1e-12);
    }
}
