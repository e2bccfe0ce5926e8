use nalgebra::{SVector, Vector3};
use navfuse::experiments::{Scenario, ScenarioConfig};
use navfuse::ins::mid_attitude;
use navfuse::rng::seeded;
use navfuse::sim::{empirical_cross_corr, generate, TrajectoryKind, TrajectoryProfile};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn profile() -> impl Strategy<Value = TrajectoryProfile> {
    (
        prop_oneof![
            Just(TrajectoryKind::Straight),
            Just(TrajectoryKind::Lawnmower),
            Just(TrajectoryKind::SinusoidHeading),
            Just(TrajectoryKind::Racetrack),
        ],
        0.5..2.5f64,
        0.0..0.3f64,
        0.0..0.2f64,
        0.0..0.03f64,
        -3.0..3.0f64,
    )
        .prop_map(|(kind, speed, variation, sway, wobble, heading)| TrajectoryProfile {
            kind,
            speed,
            duration: 120.0,
            speed_variation: variation,
            sway_amplitude: sway,
            wobble_amplitude: wobble,
            initial_heading: heading,
            ..TrajectoryProfile::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truth_is_kinematically_consistent(p in profile()) {
        let dt = 0.01;
        let truth = generate(&p, dt, 9.81).unwrap();
        prop_assert_eq!(truth.states.len(), truth.imu.len() + 1);
        let g = Vector3::new(0.0, 0.0, 9.81);
        for k in 1..truth.states.len() - 1 {
            let (a, b, c) = (&truth.states[k - 1], &truth.states[k], &truth.states[k + 1]);
            // Central differences of position against velocity.
            let v_fd = (c.position - a.position) / (2.0 * dt);
            prop_assert!((v_fd - b.velocity).norm() < 1e-3, "k = {}", k);
            // Specific force rotated to the navigation frame plus gravity is the acceleration.
            let mid = mid_attitude(&b.attitude, &truth.imu[k].angular_rate, dt);
            let acc = mid * truth.imu[k].specific_force + g;
            let a_fd = (c.velocity - b.velocity) / dt;
            prop_assert!((acc - a_fd).norm() < 1e-9, "k = {}", k);
            // Body rate integrates the attitude.
            let q = b.attitude * nalgebra::UnitQuaternion::from_scaled_axis(truth.imu[k].angular_rate * dt);
            prop_assert!(q.angle_to(&c.attitude) < 1e-12);
        }
    }

    #[test]
    fn independent_sequences_stay_inside_the_band(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let mut draw = || SVector::<f64, 2>::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let w: Vec<_> = (0..4000).map(|_| draw()).collect();
        let e: Vec<_> = (0..4000).map(|_| draw()).collect();
        let c = empirical_cross_corr(&w, &e, 0).unwrap();
        prop_assert!((c.band - 3.0 / 4000f64.sqrt()).abs() < 1e-12);
        prop_assert!(c.max_abs_correlation() < 0.08);
    }
}

#[test]
fn planted_correlation_is_recovered_at_its_lag() {
    let mut rng = seeded(5);
    let n = 20_000;
    let z: Vec<f64> = (0..n + 1).map(|_| rng.sample(StandardNormal)).collect();
    let u: Vec<f64> = (0..n + 1).map(|_| rng.sample(StandardNormal)).collect();
    let rho: f64 = 0.42;
    let w: Vec<SVector<f64, 1>> = z[..n].iter().map(|&v| SVector::from([v])).collect();
    let e: Vec<SVector<f64, 1>> = (0..n)
        .map(|k| {
            let prev = if k == 0 { u[n] } else { z[k - 1] };
            SVector::from([rho * prev + (1.0 - rho * rho).sqrt() * u[k]])
        })
        .collect();
    let c1 = empirical_cross_corr(&w, &e, 1).unwrap();
    assert!((c1.correlation[(0, 0)] - rho).abs() < 0.02, "{}", c1.correlation);
    assert!(c1.significant(0, 0));
    let c0 = empirical_cross_corr(&w, &e, 0).unwrap();
    assert_eq!(c0.significant_count(), 0, "{}", c0.correlation);
}

#[test]
fn scenarios_are_reproducible_from_their_seed() {
    let cfg = ScenarioConfig {
        profile: TrajectoryProfile {
            duration: 60.0,
            ..TrajectoryProfile::default()
        },
        ..ScenarioConfig::default()
    };
    let a = Scenario::simulate(&cfg, 11).unwrap();
    let b = Scenario::simulate(&cfg, 11).unwrap();
    let c = Scenario::simulate(&cfg, 12).unwrap();
    assert_eq!(a.imu, b.imu);
    assert_eq!(a.dvl, b.dvl);
    assert_ne!(a.imu, c.imu);
    assert_eq!(a.truth, c.truth);
}

#[test]
fn imu_noise_matches_its_declared_sigma() {
    let cfg = ScenarioConfig {
        profile: TrajectoryProfile {
            duration: 200.0,
            ..TrajectoryProfile::default()
        },
        ..ScenarioConfig::default()
    };
    let s = Scenario::simulate(&cfg, 3).unwrap();
    let n = s.imu_noise.process.len() as f64;
    let var = |i: usize| s.imu_noise.process.iter().map(|w| w[i] * w[i]).sum::<f64>() / n;
    let sa = cfg.noise.accel_noise;
    let sg = cfg.noise.gyro_noise;
    for i in 0..3 {
        assert!((var(i).sqrt() / sa - 1.0).abs() < 0.02);
        assert!((var(3 + i).sqrt() / sg - 1.0).abs() < 0.02);
    }
    // Every DVL epoch lands on an IMU sample at the DVL rate.
    let stride = (cfg.imu_rate / cfg.dvl_rate).round() as usize;
    for (j, &k) in s.dvl.state_index.iter().enumerate() {
        assert_eq!(k, (j + 1) * stride);
        assert!((s.dvl.epochs[j].time - s.truth.states[k].time).abs() < 1e-12);
    }
}
