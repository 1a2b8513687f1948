mod common;

use common::normal_matrix;
use dropact_core::penalty::{
    activation_pattern, closed_form_loss, enumerated_expected_loss, exact_expected_loss, monte_carlo_expected_loss,
    penalty_term, penalty_via_pattern, prediction_loss, random_instance, OneHiddenNet, SampleSet,
};
use dropact_core::rng::generator;
use dropact_core::tensor::Tensor;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

const PS: [f64; 5] = [0.3, 0.5, 0.8, 0.95, 1.0];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_form_matches_enumeration(
        seed in any::<u64>(),
        k in 1usize..=10,
        d_in in 1usize..=6,
        d_out in 1usize..=6,
        n in 1usize..=8,
        pi in 0usize..5,
    ) {
        let (net, data) = random_instance(k, d_in, d_out, n, &mut generator(seed)).unwrap();
        let p = PS[pi];
        let e = enumerated_expected_loss(&net, &data, p).unwrap();
        let c = exact_expected_loss(&net, &data, p).unwrap();
        prop_assert!(rel(e, c) <= 1e-10, "enumerated {} exact {}", e, c);
    }

    #[test]
    fn penalty_forms_agree_and_are_nonnegative(
        seed in any::<u64>(),
        k in 1usize..=12,
        pi in 0usize..5,
    ) {
        let (net, data) = random_instance(k, 3, 2, 4, &mut generator(seed)).unwrap();
        let p = PS[pi];
        for (x, _) in data.pairs() {
            let a = penalty_term(&net, x, p).unwrap();
            let b = penalty_via_pattern(&net, x, p).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn losses_invariant_under_scale_coupling(seed in any::<u64>(), c in 0.1f64..10.0) {
        let (net, data) = random_instance(6, 3, 2, 4, &mut generator(seed)).unwrap();
        let scaled = net.rescaled(c).unwrap();
        for p in [0.5, 0.95] {
            prop_assert!(rel(closed_form_loss(&net, &data, p).unwrap(), closed_form_loss(&scaled, &data, p).unwrap()) <= 1e-12);
            prop_assert!(rel(enumerated_expected_loss(&net, &data, p).unwrap(), enumerated_expected_loss(&scaled, &data, p).unwrap()) <= 1e-12);
        }
    }
}

#[test]
fn pattern_reproduces_relu() {
    let (net, data) = random_instance(9, 4, 2, 6, &mut generator(5)).unwrap();
    for (x, _) in data.pairs() {
        let v = net.preactivation(x).unwrap();
        let d = activation_pattern(&net, x).unwrap();
        let relu: Vec<f64> = v.iter().map(|&a| a.max(0.0)).collect();
        assert_eq!(d.apply(&v), relu);
    }
}

#[test]
fn unit_instance_is_one_half_everywhere() {
    let net = OneHiddenNet::new(Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let data = SampleSet::new(Tensor::matrix(1, 1, vec![-1.0]).unwrap(), Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    assert_eq!(closed_form_loss(&net, &data, 0.5).unwrap(), 0.5);
    assert_eq!(enumerated_expected_loss(&net, &data, 0.5).unwrap(), 0.5);
    assert_eq!(exact_expected_loss(&net, &data, 0.5).unwrap(), 0.5);
    let mc = monte_carlo_expected_loss(&net, &data, 0.5, 1_000_000, &mut generator(11)).unwrap();
    assert!((mc.mean - 0.5).abs() <= 4.0 * mc.stderr, "{mc:?}");
}

/// With a single hidden unit the cross terms vanish and the penalized form is exact.
#[test]
fn penalized_form_exact_for_one_unit() {
    for seed in 0..20 {
        let (net, data) = random_instance(1, 3, 4, 6, &mut generator(seed)).unwrap();
        for p in PS {
            let e = enumerated_expected_loss(&net, &data, p).unwrap();
            let c = closed_form_loss(&net, &data, p).unwrap();
            assert!(rel(e, c) <= 1e-12, "seed {seed} p {p}: {e} vs {c}");
        }
    }
}

/// Orthogonal readout columns also remove the cross terms.
#[test]
fn penalized_form_exact_for_orthogonal_readout() {
    let mut rng = generator(8);
    let w1 = normal_matrix(4, 3, &mut rng);
    let w2 = Tensor::new(
        vec![4, 4],
        vec![
            2.0, 0.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.0, //
            0.0, 0.0, 0.0, 3.0,
        ],
    )
    .unwrap();
    let net = OneHiddenNet::new(w1, w2).unwrap();
    let data = SampleSet::new(normal_matrix(7, 3, &mut rng), normal_matrix(7, 4, &mut rng)).unwrap();
    for p in PS {
        let e = enumerated_expected_loss(&net, &data, p).unwrap();
        assert!(rel(e, closed_form_loss(&net, &data, p).unwrap()) <= 1e-12);
    }
}

#[test]
fn monte_carlo_agrees_with_enumeration() {
    for seed in 0..5 {
        let (net, data) = random_instance(8, 3, 2, 4, &mut generator(seed)).unwrap();
        let e = enumerated_expected_loss(&net, &data, 0.8).unwrap();
        let mc = monte_carlo_expected_loss(&net, &data, 0.8, 20_000, &mut generator(100 + seed)).unwrap();
        assert!((mc.mean - e).abs() <= 4.0 * mc.stderr, "seed {seed}: {e} vs {mc:?}");
    }
}

#[test]
fn monte_carlo_is_deterministic_at_p_one() {
    let (net, data) = random_instance(5, 2, 2, 3, &mut generator(3)).unwrap();
    let mc = monte_carlo_expected_loss(&net, &data, 1.0, 50, &mut generator(4)).unwrap();
    assert_eq!(mc.stderr, 0.0);
    assert!(rel(mc.mean, prediction_loss(&net, &data, 1.0).unwrap()) <= 1e-15);
}
