mod common;

use approx::assert_relative_eq;
use gprloc::geom::{Pose3, Tangent6};
use gprloc::graph::imu::{gravity_vector, imu_residual, preintegrate, ImuBias, ImuSample};
use gprloc::graph::{Factor, NoiseConfig, State};
use gprloc::preprocess::{dewow_with_corner, sec_gain, Radargram, Trace};
use gprloc::regmodel::{engineered_register, RegistrationConfig};
use nalgebra::{DMatrix, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tangent() -> impl Strategy<Value = Tangent6> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64)).prop_filter_map(
        "rotation inside the principal branch",
        |(w, v)| {
            let w = Vector3::from(w);
            (w.norm() < 3.0).then(|| Tangent6::new(w, Vector3::from(v)))
        },
    )
}

fn pose() -> impl Strategy<Value = Pose3> {
    tangent().prop_map(|xi| Pose3::exp(&xi))
}

fn close(a: &Pose3, b: &Pose3) -> f64 {
    a.boxminus(b).norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn group_axioms(a in pose(), b in pose(), c in pose()) {
        prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) < 1e-9);
        prop_assert!(close(&a.compose(&Pose3::identity()), &a) < 1e-12);
        prop_assert!(close(&a.compose(&a.inverse()), &Pose3::identity()) < 1e-9);
        prop_assert!(close(&a.compose(&b).inverse(), &b.inverse().compose(&a.inverse())) < 1e-9);
    }

    #[test]
    fn exp_log_roundtrip(xi in tangent()) {
        let back = Pose3::exp(&xi).log();
        prop_assert!((back.as_vector() - xi.as_vector()).norm() < 1e-9);
    }

    #[test]
    fn boxplus_boxminus_invert(a in pose(), xi in tangent(), b in pose()) {
        prop_assert!((a.boxplus(&xi).boxminus(&a).as_vector() - xi.as_vector()).norm() < 1e-9);
        prop_assert!(close(&b.boxplus(&a.boxminus(&b)), &a) < 1e-9);
    }

    #[test]
    fn adjoint_moves_tangents(a in pose(), xi in tangent()) {
        // a · exp(ξ) · a⁻¹ = exp(Ad_a ξ)
        let lhs = a.compose(&Pose3::exp(&xi)).compose(&a.inverse());
        let rhs = Pose3::exp(&Tangent6::from(a.adjoint() * xi.as_vector()));
        prop_assert!(close(&lhs, &rhs) < 1e-8);
    }

    #[test]
    fn relative_factor_jacobians(seed in any::<u64>()) {
        let mut r = rng(seed);
        let values = [common::state(&mut r), common::state(&mut r)];
        let z = common::pose(&mut r);
        let noise = NoiseConfig::default();
        for f in [
            Factor::gpr(0, 1, z, noise.gpr_noise().unwrap()),
            Factor::wheel(0, 1, z, noise.wheel_noise(1.0).unwrap()),
        ] {
            let m = common::jacobian_mismatch(&f, &values);
            prop_assert!(m < 1e-5, "{:?} mismatch {m}", f.kind());
        }
    }

    #[test]
    fn prior_factor_jacobian(seed in any::<u64>()) {
        let mut r = rng(seed);
        let values = [common::state(&mut r)];
        let f = Factor::prior(0, common::state(&mut r), &NoiseConfig::default().prior_sigmas()).unwrap();
        prop_assert!(common::jacobian_mismatch(&f, &values) < 1e-5);
    }

    #[test]
    fn imu_factor_jacobian(seed in any::<u64>()) {
        let mut r = rng(seed);
        let bias_hat = ImuBias::new(common::vec3(&mut r, 0.05), common::vec3(&mut r, 0.01));
        let samples: Vec<_> = (0..=50)
            .map(|k| ImuSample {
                t: k as f64 * 0.01,
                accel: common::vec3(&mut r, 1.0) + Vector3::new(0.0, 0.0, 9.81),
                gyro: common::vec3(&mut r, 0.3),
            })
            .collect();
        let noise = common::quiet_imu();
        let pim = preintegrate(&samples, bias_hat, &noise).unwrap();
        let values = [common::state(&mut r), common::state(&mut r)];
        let f = Factor::imu(0, 1, pim, &noise).unwrap();
        prop_assert!(common::jacobian_mismatch(&f, &values) < 1e-5);
    }

    #[test]
    fn preintegration_matches_closed_form(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = common::vec3(&mut r, 2.0) + Vector3::new(0.0, 0.0, 9.81);
        let w = common::vec3(&mut r, 0.5);
        let t = r.random_range(0.1..2.0);
        let pim = preintegrate(&common::constant_samples(&a, &w, t, 100.0), ImuBias::zero(), &common::quiet_imu()).unwrap();
        let (dr, dv, dp) = common::constant_rate_deltas(&a, &w, t);
        prop_assert!(dr.inverse().compose(&pim.delta_rot).log().norm() < 1e-9);
        prop_assert!((pim.delta_vel - dv).norm() < 1e-9);
        prop_assert!((pim.delta_pos - dp).norm() < 1e-9);
        let xi = State { bias: ImuBias::zero(), ..common::state(&mut r) };
        let xj = common::propagate(&xi, &a, &w, t);
        prop_assert!(imu_residual(&xi, &xj, &pim, &gravity_vector()).norm() < 1e-9);
    }

    #[test]
    fn dewow_output_has_no_dc(samples in prop::collection::vec(-100.0..100.0f64, 4..300), dc in -1e3..1e3f64) {
        let x: Vec<f64> = samples.iter().map(|v| v + dc).collect();
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let out = dewow_with_corner(&Trace::new(x, 0.25, 0.0).unwrap(), 50.0);
        let mean = out.samples.iter().sum::<f64>() / out.samples.len() as f64;
        prop_assert!(mean.abs() < 1e-9 * scale);
    }

    #[test]
    fn sec_gain_is_linear(
        x in prop::collection::vec(-10.0..10.0f64, 64),
        y in prop::collection::vec(-10.0..10.0f64, 64),
        alpha in -5.0..5.0f64,
        gain_a in 0.0..0.1f64,
        gain_b in 0.0..2.0f64,
    ) {
        let t = |v: Vec<f64>| Trace::new(v, 0.25, 0.0).unwrap();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
        let lhs = sec_gain(&t(mixed), gain_a, gain_b);
        let gx = sec_gain(&t(x), gain_a, gain_b);
        let gy = sec_gain(&t(y), gain_a, gain_b);
        for i in 0..64 {
            assert_relative_eq!(lhs.samples[i], alpha * gx.samples[i] + gy.samples[i], epsilon = 1e-9, max_relative = 1e-12);
        }
        let unit = sec_gain(&t(gx.samples.clone()), 0.0, 0.0);
        prop_assert_eq!(unit.samples, gx.samples);
    }

    #[test]
    fn engineered_register_is_shift_equivariant(seed in any::<u64>(), shift in -16i64..=16) {
        let mut r = rng(seed);
        let big = DMatrix::from_fn(30, 90, |_, _| r.random_range(-1.0..1.0));
        let start = 25usize;
        let s1 = Radargram::new(big.columns(start, 41).into_owned(), 0.25, 0.05);
        let s2 = Radargram::new(big.columns((start as i64 + shift) as usize, 41).into_owned(), 0.25, 0.05);
        let res = engineered_register(&s1, &s2, &RegistrationConfig::default(), 0.5).unwrap();
        prop_assert_eq!(res.shift, shift);
        let back = engineered_register(&s2, &s1, &RegistrationConfig::default(), 0.5).unwrap();
        prop_assert_eq!(back.shift, -shift);
    }
}

#[test]
fn tangent_vector_layout() {
    let xi = Tangent6::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0));
    assert_eq!(xi.as_vector(), &Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0));
}
