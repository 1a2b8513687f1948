mod common;

use common::{normal_matrix, random_case};
use dropact_core::penalty::{closed_form_loss, record_closed_form_loss, OneHiddenNet, SampleSet};
use dropact_core::rng::generator;
use dropact_core::tape::{finite_difference_grad, Tape};
use dropact_core::tensor::relative_error;

#[test]
fn random_models_with_frozen_realizations() {
    for seed in 0..25 {
        let case = random_case(seed);
        let err = case.max_gradient_error(1e-5).unwrap();
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn closed_form_loss_gradient() {
    let mut rng = generator(2024);
    let w1 = normal_matrix(5, 3, &mut rng);
    let w2 = normal_matrix(2, 5, &mut rng);
    let data = SampleSet::new(normal_matrix(4, 3, &mut rng), normal_matrix(4, 2, &mut rng)).unwrap();
    let p = 0.8;

    let mut tape = Tape::new();
    let a = tape.leaf(w1.clone());
    let b = tape.leaf(w2.clone());
    let loss = record_closed_form_loss(&mut tape, a, b, &data, p).unwrap();
    let direct = closed_form_loss(&OneHiddenNet::new(w1.clone(), w2.clone()).unwrap(), &data, p).unwrap();
    assert!(relative_error(tape.value(loss).item().unwrap(), direct) <= 1e-12);

    let g = tape.backward(loss).unwrap();
    let fd1 = finite_difference_grad(
        |t| closed_form_loss(&OneHiddenNet::new(t.clone(), w2.clone())?, &data, p),
        &w1,
        1e-5,
    )
    .unwrap();
    let fd2 = finite_difference_grad(
        |t| closed_form_loss(&OneHiddenNet::new(w1.clone(), t.clone())?, &data, p),
        &w2,
        1e-5,
    )
    .unwrap();
    for (an, fd) in [(g.wrt(a), fd1), (g.wrt(b), fd2)] {
        for (x, y) in an.data().iter().zip(fd.data()) {
            assert!(relative_error(*x, *y) <= 1e-6, "{x} vs {y}");
        }
    }
}
