use nalgebra::DVector;
use proptest::prelude::*;
use ssd_core::estimators::optimal_c_from_samples;
use ssd_core::moments::{normal_vector, seeded_stream, total_variance};
use ssd_core::*;

fn toy() -> DistillationTarget {
    DistillationTarget::new(
        GaussianMixture::three_mode_toy(),
        DiffusionSchedule::new(ScheduleKind::Cosine, 1000).unwrap(),
    )
    .unwrap()
}

fn point() -> impl Strategy<Value = DVector<f64>> {
    (-2.0..4.0f64, -2.0..3.0f64).prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
}

fn noise() -> impl Strategy<Value = DVector<f64>> {
    (-3.0..3.0f64, -3.0..3.0f64)
        .prop_filter("non-zero noise", |(a, b)| a.abs() + b.abs() > 1e-6)
        .prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rescaled_ssd_matches_h_norm(x0 in point(), eps in noise(), t in 1u32..=300) {
        let target = toy();
        let out = target.ssd_estimator(&x0, &eps, t, 300).unwrap();
        let h = target.mode_disengaging(&x0, &eps, t).unwrap();
        match out.branch.unwrap() {
            SsdBranch::Rescaled => prop_assert!((out.value.norm() - h.norm()).abs() <= 1e-9 * h.norm().max(1.0)),
            SsdBranch::Degenerate => prop_assert!(out.value.norm() == 0.0),
            SsdBranch::ModeDisengaging => prop_assert!(false, "t ≤ M must not take the h branch"),
        }
    }

    #[test]
    fn responsibilities_sum_to_one(x in point(), t in 0u32..=1000) {
        let target = toy();
        let m = target.mixture().noised_marginal(target.schedule(), t).unwrap();
        let gamma = m.responsibilities(&x).unwrap();
        prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(gamma.iter().all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn sample_c_minimizes_residual_variance(seed in 0u64..1000, k in -2.0..3.0f64, t in 1u32..1000) {
        let target = toy();
        let noised = target.at(t).unwrap();
        let x0 = DVector::from_vec(vec![1.3, 0.9]);
        let mut rng = seeded_stream(seed, 0);
        let eps: Vec<_> = (0..64).map(|_| normal_vector(&mut rng, 2)).collect();
        let eps_hat: Vec<_> = eps.iter().map(|e| noised.mode_seeking(&x0, e).unwrap()).collect();
        let c = optimal_c_from_samples(&eps_hat, &eps).unwrap();
        let var = |k: f64| {
            let r: Vec<_> = eps_hat.iter().zip(&eps).map(|(a, e)| a - e * k).collect();
            total_variance(&r)
        };
        prop_assert!(var(c) <= var(k) + 1e-12 * var(k).max(1.0));
    }
}

/// `E[ε̂ − kε] = E[ε̂]` for any fixed `k`, since `E[ε] = 0`: the two means
/// from independent noise sets agree within sampling error.
#[test]
fn fixed_k_residual_is_unbiased() {
    let target = toy();
    let x0 = DVector::from_vec(vec![1.2, 0.7]);
    let n = 100_000;
    let stats = |noised: &NoisedTarget, stream: u64, k: f64| {
        let mut rng = seeded_stream(5, stream);
        let xs: Vec<_> = (0..n)
            .map(|_| {
                let e = normal_vector(&mut rng, 2);
                noised.mode_seeking(&x0, &e).unwrap() - e * k
            })
            .collect();
        let mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n as f64;
        (mean, total_variance(&xs) / n as f64)
    };
    for (t, k) in [(100, 0.5), (400, 1.0), (800, 2.0)] {
        let noised = target.at(t).unwrap();
        let (shifted, var_a) = stats(&noised, 2 * t as u64, k);
        let (plain, var_b) = stats(&noised, 2 * t as u64 + 1, 0.0);
        let stderr = (var_a + var_b).sqrt();
        assert!((shifted - plain).norm() < 5.0 * stderr, "t = {t} k = {k}");
    }
}
