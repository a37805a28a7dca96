use cilab_core::accuracy::{collective_accuracy_approx, collective_accuracy_exact};
use cilab_core::mc::{mc_accuracy, mc_expected_rewards};
use cilab_core::rewards::{expected_rewards, expected_rewards_exact};
use cilab_core::{Attention, FactorModel, RewardConfig, RewardMode, RewardSpec, Scheme, DEFAULT_EXACT_LIMIT};

const SCHEMES: [Scheme; 3] = [Scheme::Binary, Scheme::Market, Scheme::Minority];

fn skewed(n: usize) -> Attention {
    let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64).collect();
    Attention::normalized(&w).unwrap()
}

#[test]
fn exact_rewards_agree_with_sampling() {
    for seed in 0..3 {
        let model = FactorModel::sample(9, seed).unwrap();
        let att = skewed(9);
        for scheme in SCHEMES {
            let spec = RewardSpec::new(scheme);
            let exact = expected_rewards_exact(&model, &att, &spec, DEFAULT_EXACT_LIMIT).unwrap();
            let mc = mc_expected_rewards(&model, &att, &spec, 400_000, seed).unwrap();
            for (e, m) in exact.values.iter().zip(&mc) {
                assert!(m.z_score(*e).abs() < 4.5, "{scheme} seed {seed}: {e} vs {m:?}");
            }
        }
    }
}

#[test]
fn approximate_rewards_track_sampling_at_moderate_size() {
    let model = FactorModel::sample(200, 4).unwrap();
    let att = skewed(200);
    let cfg = RewardConfig {
        mode: RewardMode::Approx,
        ..RewardConfig::default()
    };
    for scheme in SCHEMES {
        let spec = RewardSpec::new(scheme);
        let approx = expected_rewards(&model, &att, &spec, &cfg).unwrap().values;
        let mc = mc_expected_rewards(&model, &att, &spec, 200_000, 9).unwrap();
        for (i, (a, m)) in approx.iter().zip(&mc).enumerate() {
            let scale = a.abs().max(1.0);
            assert!(
                (a - m.value).abs() <= 5.0 * m.std_error + 0.01 * scale,
                "{scheme} factor {i}: approx {a} vs sampled {m:?}"
            );
        }
    }
}

#[test]
fn accuracy_paths_agree() {
    let small = FactorModel::sample(14, 2).unwrap();
    let att = skewed(14);
    let exact = collective_accuracy_exact(&small, &att, DEFAULT_EXACT_LIMIT).unwrap();
    let sampled = mc_accuracy(&small, &att, 400_000, 1).unwrap();
    assert!(sampled.z_score(exact).abs() < 4.5, "{exact} vs {sampled:?}");

    let large = FactorModel::sample(1000, 2).unwrap();
    let att = skewed(1000);
    let approx = collective_accuracy_approx(&large, &att).unwrap();
    let sampled = mc_accuracy(&large, &att, 400_000, 1).unwrap();
    assert!((approx - sampled.value).abs() < 0.01, "{approx} vs {sampled:?}");
}
