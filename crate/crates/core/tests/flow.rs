use geoalign_core::flow::{sample_trajectory, step_log_prob, GaussianDataVelocity, NoiseSchedule};
use geoalign_core::toy_world::{Architecture, PolicyNetwork, ScenePreset};
use proptest::prelude::*;
use rayon::prelude::*;

/// Second moment of `(1−t)x₀ + tε` for `x₀ ~ N(0, s²)`.
fn analytic_second_moment(s: f64, t: f64) -> f64 {
    (1.0 - t).powi(2) * s * s + t * t
}

#[test]
fn sde_preserves_gaussian_marginals() {
    let field = GaussianDataVelocity { data_std: 2.0 };
    for a in [0.0, 0.3, 0.7] {
        let schedule = NoiseSchedule::uniform(100, a).unwrap();
        let finals: Vec<Vec<f64>> = (0..10_000u64)
            .into_par_iter()
            .map(|seed| {
                let traj = sample_trajectory(&field, &schedule, &[], seed).unwrap();
                traj.states.iter().map(|x| x[0]).collect()
            })
            .collect();
        for idx in [10, 25, 50, 75, 90, 100] {
            let t = schedule.timesteps[idx];
            let m2 = finals.iter().map(|s| s[idx] * s[idx]).sum::<f64>() / finals.len() as f64;
            let oracle = analytic_second_moment(2.0, t);
            assert!((m2 - oracle).abs() <= 0.05 * oracle, "a = {a}, t = {t}: {m2} vs {oracle}");
        }
    }
}

#[test]
fn step_density_integrates_to_one() {
    let (mean, std) = ([0.3], 0.2);
    let h = 1e-3;
    let mass: f64 = (-4000..=4000)
        .map(|i| step_log_prob(&[0.3 + i as f64 * h], &mean, std).unwrap().exp() * h)
        .sum();
    assert!((mass - 1.0).abs() <= 1e-3, "{mass}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectories_are_pure(seed in any::<u64>(), a in 0.05..1.0f64, preset in 0usize..4) {
        let policy = PolicyNetwork::init(Architecture::toy(), seed ^ 0x55);
        let schedule = NoiseSchedule::uniform(12, a).unwrap();
        let cond = ScenePreset::ALL[preset].condition();
        let first = sample_trajectory(&policy, &schedule, &cond, seed).unwrap();
        let second = sample_trajectory(&policy, &schedule, &cond, seed).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.states.len(), first.step_log_probs.len() + 1);
        prop_assert!(first.step_log_probs.iter().all(|l| l.is_finite()));
    }
}
