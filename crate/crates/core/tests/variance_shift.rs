mod common;

use common::normal_matrix;
use dropact_core::activations::ActivationKind;
use dropact_core::networks::build_classifier;
use dropact_core::rng::generator;
use dropact_core::trainer::{Dataset, TrainConfig};
use dropact_core::variance_shift::{
    analytic_shift_ratio, bn_block_shift_monitor, measure_block_shift, simulate_box, BoxConfig,
};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn variances_match_at_one_million_samples() {
    for (weights, p) in [(vec![1.0], 0.95), (vec![1.0], 0.5)] {
        let r = simulate_box(&BoxConfig {
            weights,
            p,
            sample_count: 1_000_000,
            seed: 17,
        })
        .unwrap();
        assert!(rel(r.empirical_var_train, r.analytic_var_train) <= 0.01, "{r:?}");
        assert!(rel(r.empirical_var_test, r.analytic_var_test) <= 0.01, "{r:?}");
        assert!((r.empirical_mean_train - r.analytic_mean).abs() <= 4.0 * r.stderr_mean_train);
        assert!((r.empirical_mean_test - r.analytic_mean).abs() <= 4.0 * r.stderr_mean_test);
    }
    let r = simulate_box(&BoxConfig::gaussian_weights(64, 0.95, 1_000_000, 3, 4)).unwrap();
    assert!(rel(r.empirical_var_train, r.analytic_var_train) <= 0.01, "{r:?}");
    assert!(rel(r.empirical_var_test, r.analytic_var_test) <= 0.01, "{r:?}");
}

#[test]
fn ratios_within_three_percent() {
    for p in [0.5, 0.95] {
        let r = simulate_box(&BoxConfig::gaussian_weights(512, p, 100_000, 1, 2)).unwrap();
        assert!(rel(r.empirical_ratio, analytic_shift_ratio(p).unwrap()) <= 0.03, "{r:?}");
    }
}

#[test]
fn retain_one_ratio_is_one() {
    let r = simulate_box(&BoxConfig::gaussian_weights(32, 1.0, 50_000, 5, 6)).unwrap();
    assert_eq!(r.empirical_ratio, 1.0);
    assert!((r.analytic_ratio - 1.0).abs() < 1e-15);
}

#[test]
fn simulation_is_seed_deterministic() {
    let cfg = BoxConfig::gaussian_weights(16, 0.8, 20_000, 9, 10);
    assert_eq!(simulate_box(&cfg).unwrap(), simulate_box(&cfg).unwrap());
}

#[test]
fn untrained_model_at_retain_one_has_unit_ratio() {
    let mut rng = generator(31);
    let model = build_classifier(6, &[10, 8], 3, ActivationKind::drop_act(1.0), true, &mut rng).unwrap();
    let x = normal_matrix(40, 6, &mut rng);
    let (train, test) = measure_block_shift(&model, &x, &mut generator(1)).unwrap();
    assert_eq!(train, test);
}

#[test]
fn monitor_series_follows_schedule() {
    let mut rng = generator(8);
    let x = normal_matrix(40, 4, &mut rng);
    let labels = (0..40).map(|i| i % 2).collect();
    let data = Dataset::classification(x, labels).unwrap();
    let mut model = build_classifier(4, &[6, 6], 2, ActivationKind::drop_act(0.9), true, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: Some(10),
        ..TrainConfig::default()
    };
    let schedule = [0, 2, 4];
    let (series, record) = bn_block_shift_monitor(&mut model, &data, &cfg, &schedule).unwrap();
    assert_eq!(series.iter().map(|s| s.epoch).collect::<Vec<_>>(), schedule);
    assert_eq!(record.train_loss.len(), 4);
    let mut plain = build_classifier(4, &[6], 2, ActivationKind::drop_act(0.9), true, &mut generator(0)).unwrap();
    assert!(bn_block_shift_monitor(&mut plain, &data, &cfg, &schedule).is_err());
}
