use dropact_core::tensor::Tensor;
use dropact_core::Error;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6, 1usize..6)
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in dims().prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n)))) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) <= 1e-12 * scale);
    }

    #[test]
    fn transpose_reverses_products(a in matrix(3, 4), b in matrix(4, 2)) {
        let lhs = a.matmul(&b).unwrap().transpose().unwrap();
        let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn inner_mismatch_is_rejected(k in 1usize..6, j in 1usize..6) {
        prop_assume!(k != j);
        let a = Tensor::zeros(&[2, k]);
        let b = Tensor::zeros(&[j, 3]);
        let is_dimension_error = matches!(a.matmul(&b), Err(Error::Dimension { .. }));
        prop_assert!(is_dimension_error);
    }
}
