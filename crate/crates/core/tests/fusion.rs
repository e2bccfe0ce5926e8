use nalgebra::Matrix3;
use navfuse::ekf::{
    apply_error, build_error_dynamics, velocity_observation, FilterConfig, MeasurementFrame, NoiseModel, StateMatrix,
    StateVector, VelocityMeasurement,
};
use navfuse::experiments::{Scenario, ScenarioConfig};
use navfuse::ins::{ImuSample, NavState, Strapdown};
use navfuse::metrics::{uncertainty_summary, StateGroup};
use navfuse::sim::TrajectoryProfile;

fn scenario(duration: f64, seed: u64) -> Scenario {
    let cfg = ScenarioConfig {
        profile: TrajectoryProfile {
            duration,
            ..TrajectoryProfile::default()
        },
        ..ScenarioConfig::default()
    };
    Scenario::simulate(&cfg, seed).unwrap()
}

/// Textbook closed-loop error-state EKF: explicit inverse for the gain and
/// the Joseph form for the covariance.
fn reference_filter(
    imu: &[ImuSample],
    meas: &[VelocityMeasurement],
    initial: NavState,
    noise: &NoiseModel,
    config: &FilterConfig,
) -> Vec<(NavState, StateMatrix)> {
    let ins = Strapdown::new(config.gravity);
    let h = velocity_observation();
    let q = noise.process_covariance();
    let mut state = initial;
    let mut p = config.initial.covariance();
    let mut out = Vec::new();
    let mut next = meas.iter().peekable();
    for sample in imu {
        let dt = sample.time - state.time;
        let (f, g) = build_error_dynamics(&state, sample, dt).unwrap();
        state = ins.propagate(&state, sample, dt).unwrap();
        state.time = sample.time;
        p = f * p * f.transpose() + g * q * g.transpose();
        if let Some(m) = next.next_if(|m| (m.time - sample.time).abs() < 1e-9) {
            let c = state.attitude.to_rotation_matrix().into_inner();
            let (z, r) = match m.frame {
                MeasurementFrame::Body => (c * m.velocity, c * m.covariance * c.transpose()),
                MeasurementFrame::Navigation => (m.velocity, m.covariance),
            };
            let s = h * p * h.transpose() + r;
            let k = p * h.transpose() * s.try_inverse().unwrap();
            let dx: StateVector = k * (z - state.velocity);
            let a = StateMatrix::identity() - k * h;
            p = a * p * a.transpose() + k * r * k.transpose();
            state = apply_error(&state, &dx);
            out.push((state, p));
        }
    }
    out
}

#[test]
fn neglect_run_matches_the_reference_ekf() {
    let s = scenario(120.0, 21);
    let meas = s.ls_measurements().unwrap();
    let config = FilterConfig {
        use_cross_correlation: false,
        ..FilterConfig::default()
    };
    let run = s.fuse(&meas, &s.config.noise, &config, true).unwrap();
    let reference = reference_filter(&s.imu, &meas, s.initial_estimate(true), &s.config.noise, &config);
    assert_eq!(run.updates.len(), reference.len());
    for (u, (nav, p)) in run.updates.iter().zip(&reference) {
        assert!((u.nav.velocity - nav.velocity).norm() < 1e-9, "t = {}", u.time);
        assert!(u.nav.attitude.angle_to(&nav.attitude) < 1e-9);
        assert!((u.covariance - p).norm() <= 1e-9 * p.norm(), "t = {}", u.time);
    }
}

#[test]
fn aware_filter_reduces_velocity_and_attitude_uncertainty() {
    let s = scenario(300.0, 22);
    let meas = s.ls_measurements().unwrap();
    let noise = NoiseModel {
        rho: 0.42,
        ..s.config.noise
    };
    let (aware, neglect) = s.paired_runs(&meas, &noise, &FilterConfig::default(), true).unwrap();
    assert_eq!(aware.psd_clamps + neglect.psd_clamps, 0);
    let summary = uncertainty_summary(&aware, &neglect).unwrap();
    assert!(summary.group(StateGroup::Velocity).mean_std_improvement_pct > 0.0);
    assert!(summary.group(StateGroup::Misalignment).mean_std_improvement_pct > 0.0);
    for g in &summary.groups {
        assert!(g.mean_std_improvement_pct > -1.0, "{g:?}");
    }
}

#[test]
fn rho_zero_aware_equals_neglect() {
    let s = scenario(60.0, 23);
    let meas = s.ls_measurements().unwrap();
    let noise = NoiseModel {
        rho: 0.0,
        ..s.config.noise
    };
    let (aware, neglect) = s.paired_runs(&meas, &noise, &FilterConfig::default(), true).unwrap();
    assert_eq!(aware.rows, neglect.rows);
}

#[test]
fn limiter_off_reports_infeasible_cross_covariance() {
    let s = scenario(120.0, 24);
    let meas = s.ls_measurements().unwrap();
    let noise = NoiseModel {
        rho: 0.9,
        ..s.config.noise
    };
    let mut config = FilterConfig {
        limit_cross_cov: false,
        ..FilterConfig::default()
    };
    config.initial.tilt = 5e-4;
    let err = s.fuse(&meas, &noise, &config, false).unwrap_err();
    assert!(matches!(err, navfuse::experiments::ExperimentError::Ekf(navfuse::ekf::EkfError::Inconsistent { .. })), "{err}");
    config.limit_cross_cov = true;
    let run = s.fuse(&meas, &noise, &config, false).unwrap();
    assert!(run.cross_cov_limited > 0);
    assert!(run.updates.iter().all(|u| u.cross_cov_scale <= 1.0 && u.cross_cov_scale > 0.0));
}

#[test]
fn navigation_frame_measurements_skip_rotation() {
    let s = scenario(30.0, 25);
    let meas: Vec<VelocityMeasurement> = s
        .truth_at_epochs()
        .iter()
        .map(|t| VelocityMeasurement {
            time: t.time,
            velocity: t.velocity,
            covariance: Matrix3::identity() * 1e-4,
            frame: MeasurementFrame::Navigation,
            source: navfuse::ekf::MeasurementSource::Synthetic,
        })
        .collect();
    let run = s.fuse(&meas, &s.config.noise, &FilterConfig::default(), true).unwrap();
    let last = run.updates.last().unwrap();
    let truth = s.truth_at_epochs().last().unwrap().velocity;
    assert!((last.nav.velocity - truth).norm() < 0.05);
    assert_eq!(last.innovation.len(), 3);
}
