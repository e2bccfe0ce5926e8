use super::*;
use crate::ins::{Strapdown, STANDARD_GRAVITY};
use crate::rng::seeded;
use nalgebra::{Matrix1, SMatrix, Vector1};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_matrix<const R: usize, const C: usize>(rng: &mut impl Rng) -> SMatrix<f64, R, C> {
    SMatrix::from_fn(|_, _| StandardNormal.sample(rng))
}

fn random_psd<const N: usize>(rng: &mut impl Rng) -> SMatrix<f64, N, N> {
    let l = random_matrix::<N, N>(rng);
    l * l.transpose() + SMatrix::<f64, N, N>::identity() * 1e-3
}

/// Textbook gain `P H^T (H P H^T + R)^-1` with an explicit inverse.
fn standard_gain(p: &StateMatrix, h: &ObservationMatrix, r: &Matrix3<f64>) -> GainMatrix {
    let s = h * p * h.transpose() + r;
    p * h.transpose() * s.try_inverse().unwrap()
}

#[test]
fn jacobian_blocks_for_simple_forces() {
    let id = UnitQuaternion::identity();
    let a = continuous_jacobian(&id, &Vector3::zeros());
    assert_eq!(a.fixed_view::<3, 3>(idx::VEL, idx::ATT).into_owned(), Matrix3::zeros());

    let f = Vector3::new(0.0, 0.0, -9.81);
    let a = continuous_jacobian(&id, &f);
    let block = a.fixed_view::<3, 3>(idx::VEL, idx::ATT).into_owned();
    assert_eq!(block, -skew(&f));
    assert_eq!(block[(0, 1)], -9.81);
    assert_eq!(block[(1, 0)], 9.81);
    assert_eq!(a.fixed_view::<3, 3>(idx::VEL, idx::ACC_BIAS).into_owned(), -Matrix3::identity());
    assert_eq!(a.fixed_view::<3, 3>(idx::ATT, idx::GYR_BIAS).into_owned(), -Matrix3::identity());
}

#[test]
fn discrete_dynamics_reject_bad_step() {
    let s = NavState::at_rest(0.0);
    let smp = ImuSample {
        time: 0.0,
        specific_force: Vector3::zeros(),
        angular_rate: Vector3::zeros(),
    };
    assert_eq!(build_error_dynamics(&s, &smp, 0.0), Err(EkfError::NonPositiveStep(0.0)));
}

/// Central-difference Jacobian of one mechanization step with respect to the
/// error state.
fn numerical_jacobian(state: &NavState, sample: &ImuSample, dt: f64, h: f64) -> StateMatrix {
    let ins = Strapdown::default();
    let nominal = ins.propagate(state, sample, dt).unwrap();
    let mut jac = StateMatrix::zeros();
    for j in 0..STATE_DIM {
        let mut dx = StateVector::zeros();
        dx[j] = h;
        let plus = ins.propagate(&apply_error(state, &dx), sample, dt).unwrap();
        let minus = ins.propagate(&apply_error(state, &-dx), sample, dt).unwrap();
        let col = (nav_error(&plus, &nominal) - nav_error(&minus, &nominal)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

#[test]
fn transition_matches_numerical_jacobian() {
    let mut rng = seeded(42);
    for _ in 0..5 {
        let state = NavState {
            velocity: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            attitude: UnitQuaternion::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            ),
            accel_bias: Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
            gyro_bias: Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01)),
            ..NavState::at_rest(0.0)
        };
        let sample = ImuSample {
            time: 0.01,
            specific_force: Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                -STANDARD_GRAVITY + rng.random_range(-1.0..1.0),
            ),
            angular_rate: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        };
        let dt = 0.01;
        let (f, _) = build_error_dynamics(&state, &sample, dt).unwrap();
        let jac = numerical_jacobian(&state, &sample, dt, 1e-6);
        let id = StateMatrix::identity();
        let rel = ((f - id) - (jac - id)).norm() / (jac - id).norm();
        assert!(rel < 1e-5, "relative Jacobian error {rel:e}");
    }
}

#[test]
fn cross_cov_examples() {
    let q = Matrix1::new(4.0);
    let r = Matrix1::new(9.0);
    let m = build_cross_cov(&q, &r, 0.5, 0..1).unwrap();
    assert_eq!(m[(0, 0)], 3.0);
    let m = build_cross_cov(&q, &r, 0.0, 0..1).unwrap();
    assert_eq!(m[(0, 0)], 0.0);

    let m = build_state_cross_cov(&StateMatrix::identity(), &Matrix3::identity(), 1.0, CrossCovSupport::Dense)
        .unwrap();
    assert!(m.iter().all(|&v| v == 1.0));
    let m = build_state_cross_cov(&StateMatrix::identity(), &Matrix3::identity(), 0.0, CrossCovSupport::Dense)
        .unwrap();
    assert!(m.iter().all(|&v| v == 0.0));

    let m = build_state_cross_cov(&StateMatrix::identity(), &Matrix3::identity(), 1.0, CrossCovSupport::NavNoise)
        .unwrap();
    for i in 0..STATE_DIM {
        let expected = if i < idx::ACC_BIAS { 1.0 } else { 0.0 };
        assert!(m.row(i).iter().all(|&v| v == expected));
    }
}

#[test]
fn cross_cov_rejects_bad_inputs() {
    let q = StateMatrix::identity();
    let r = Matrix3::identity();
    assert_eq!(
        build_state_cross_cov(&q, &r, 1.5, CrossCovSupport::Dense),
        Err(EkfError::InvalidRho(1.5))
    );
    assert!(build_state_cross_cov(&q, &r, -0.1, CrossCovSupport::Dense).is_err());
    let mut bad = q;
    bad[(4, 4)] = -1.0;
    assert!(matches!(
        build_state_cross_cov(&bad, &r, 0.5, CrossCovSupport::Dense),
        Err(EkfError::NegativeDiagonal { what: "Q", index: 4, .. })
    ));
}

#[test]
fn scalar_gain_and_update() {
    let p = Matrix1::new(1.0);
    let h = Matrix1::new(1.0);
    let r = Matrix1::new(1.0);
    let m = Matrix1::new(0.5);
    let k = gain_correlated(&p, &h, &r, &m).unwrap();
    assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
    let up = correlated_update(&Vector1::new(0.0), &p, &h, &r, &m, &Vector1::new(0.0)).unwrap();
    assert!((up.p[(0, 0)] - 0.25).abs() < 1e-15);
    assert_eq!(up.x[0], 0.0);
}

#[test]
fn zero_cross_cov_gives_standard_gain() {
    let mut rng = seeded(1);
    let h = velocity_observation();
    for _ in 0..200 {
        let p = random_psd::<12>(&mut rng);
        let r = random_psd::<3>(&mut rng);
        let k = gain_correlated(&p, &h, &r, &CrossCovariance::zeros()).unwrap();
        let k_std = standard_gain(&p, &h, &r);
        assert!((k - k_std).abs().max() < 1e-12 * k_std.abs().max().max(1.0));
    }
}

#[test]
fn gain_solves_defining_system() {
    let mut rng = seeded(2);
    let h = velocity_observation();
    for _ in 0..200 {
        let p = random_psd::<12>(&mut rng);
        let r = random_psd::<3>(&mut rng) + Matrix3::identity() * 20.0;
        let m = random_matrix::<12, 3>(&mut rng) * 0.3;
        let k = gain_correlated(&p, &h, &r, &m).unwrap();
        let s = innovation_covariance(&p, &h, &r, &m);
        let residual = k * s - (p * h.transpose() + m);
        assert!(residual.abs().max() < 1e-10, "{}", residual.abs().max());
    }
}

#[test]
fn non_positive_innovation_covariance_is_divergence() {
    let p = Matrix1::new(1.0);
    let h = Matrix1::new(1.0);
    let r = Matrix1::new(1.0);
    let m = Matrix1::new(-1.5);
    match gain_correlated(&p, &h, &r, &m) {
        Err(EkfError::Divergence { eigenvalues }) => assert!((eigenvalues[0] + 1.0).abs() < 1e-12),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn uncorrelated_update_matches_joseph_form() {
    let mut rng = seeded(3);
    let h = velocity_observation();
    for _ in 0..200 {
        let p = random_psd::<12>(&mut rng);
        let r = random_psd::<3>(&mut rng);
        let x = random_matrix::<12, 1>(&mut rng);
        let nu = random_matrix::<3, 1>(&mut rng);
        let up = correlated_update(&x, &p, &h, &r, &CrossCovariance::zeros(), &nu).unwrap();
        let k = standard_gain(&p, &h, &r);
        let ikh = StateMatrix::identity() - k * h;
        let joseph = ikh * p * ikh.transpose() + k * r * k.transpose();
        let scale = p.abs().max();
        assert!((up.p - joseph).abs().max() < 1e-10 * scale);
        assert!((up.x - (x + k * nu)).abs().max() < 1e-10 * scale.max(1.0));
    }
}

#[test]
fn zero_innovation_keeps_state_and_shrinks_covariance() {
    let mut rng = seeded(4);
    let p = random_psd::<12>(&mut rng);
    let r = Matrix3::identity() * 0.5;
    let model = ErrorStateModel {
        f: StateMatrix::identity(),
        g: StateMatrix::identity(),
        h: velocity_observation(),
        q: StateMatrix::zeros(),
        r,
        m: CrossCovariance::zeros(),
    };
    let err = ErrorState::new(p);
    let (post, _) = update_correlated(&err, &model, &Vector3::zeros()).unwrap();
    assert_eq!(post.x, StateVector::zeros());
    assert!(post.p.trace() < p.trace());
}

#[test]
fn prediction_examples() {
    let mut rng = seeded(5);
    let p = random_psd::<12>(&mut rng);
    let err = ErrorState::new(p);
    let id = StateMatrix::identity();
    let out = predict(&err, &id, &id, &StateMatrix::zeros());
    assert!((out.p - p).abs().max() < 1e-15);
    let out = predict(&err, &id, &id, &(id * 0.25));
    for i in 0..12 {
        assert!((out.p[(i, i)] - p[(i, i)] - 0.25).abs() < 1e-14);
    }
}

#[test]
fn scalar_prediction_matches_geometric_series() {
    let (f, q, p0) = (0.97_f64, 0.3_f64, 2.0_f64);
    let mut x = Vector1::new(1.0);
    let mut p = Matrix1::new(p0);
    for _ in 0..100 {
        (x, p) = predict_generic(&x, &p, &Matrix1::new(f), &Matrix1::new(1.0), &Matrix1::new(q));
    }
    let closed = f.powi(200) * p0 + q * (0..100).map(|i| f.powi(2 * i)).sum::<f64>();
    assert!((p[(0, 0)] - closed).abs() < 1e-12 * closed);
    assert!((x[0] - f.powi(100)).abs() < 1e-14);
}

#[test]
fn injection_examples() {
    let state = NavState {
        velocity: Vector3::new(1.0, 2.0, 3.0),
        attitude: UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        ..NavState::at_rest(5.0)
    };
    let p = StateMatrix::identity() * 0.1;
    let (same, reset) = inject_and_reset(&state, &ErrorState::new(p)).unwrap();
    assert_eq!(same.velocity, state.velocity);
    assert!(same.attitude.angle_to(&state.attitude) < 1e-15);
    assert_eq!(reset.p, p);

    let mut err = ErrorState::new(p);
    err.x[0] = 0.1;
    let (moved, reset) = inject_and_reset(&state, &err).unwrap();
    assert_eq!(moved.velocity, Vector3::new(1.1, 2.0, 3.0));
    assert_eq!(reset.x, StateVector::zeros());
    assert_eq!(reset.p, p);

    let mut err = ErrorState::new(p);
    err.x[idx::ATT + 2] = 0.6;
    assert!(matches!(inject_and_reset(&state, &err), Err(EkfError::SmallAngleViolation(_))));
}

#[test]
fn nav_error_inverts_apply_error() {
    let mut rng = seeded(6);
    let state = NavState {
        velocity: Vector3::new(1.0, -0.5, 0.1),
        attitude: UnitQuaternion::from_euler_angles(0.05, -0.1, 2.0),
        ..NavState::at_rest(0.0)
    };
    for _ in 0..50 {
        let dx = random_matrix::<12, 1>(&mut rng) * 0.05;
        let e = nav_error(&apply_error(&state, &dx), &state);
        assert!((e - dx).abs().max() < 1e-12);
    }
}

/// Joint covariance of `(x_err, v)` drawn at random; the blocks give a
/// consistent `(P, M, R)` triple.
fn consistent_triple(seed: u64) -> (StateMatrix, CrossCovariance, Matrix3<f64>) {
    let mut rng = seeded(seed);
    let l = random_matrix::<15, 15>(&mut rng);
    let joint = l * l.transpose() + SMatrix::<f64, 15, 15>::identity() * 1e-6;
    let p = joint.fixed_view::<12, 12>(0, 0).into_owned();
    let m = joint.fixed_view::<12, 3>(0, 12).into_owned();
    let r = joint.fixed_view::<3, 3>(12, 12).into_owned();
    (p, m, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_is_symmetric_psd_for_consistent_triples(seed in any::<u64>()) {
        let (p, m, r) = consistent_triple(seed);
        let h = velocity_observation();
        let up = correlated_update(&StateVector::zeros(), &p, &h, &r, &m, &Vector3::zeros()).unwrap();
        prop_assert_eq!(up.p, up.p.transpose());
        let min_eig = symmetric_eigenvalues(&up.p)[0];
        prop_assert!(min_eig > -1e-9 * up.p.trace());
        prop_assert!(up.p.trace() <= p.trace() + 1e-9 * p.trace());
        prop_assert_eq!(up.clamped, 0);
    }

    #[test]
    fn zero_cross_cov_gain_is_standard(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let p = random_psd::<12>(&mut rng);
        let r = random_psd::<3>(&mut rng);
        let h = velocity_observation();
        let k = gain_correlated(&p, &h, &r, &CrossCovariance::zeros()).unwrap();
        let k_std = standard_gain(&p, &h, &r);
        prop_assert!((k - k_std).abs().max() < 1e-12 * k_std.abs().max().max(1.0));
    }
}
