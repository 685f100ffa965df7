use proptest::prelude::*;
use tilestream_nn::Matrix;

fn naive(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.shape().0, b.shape().1, |r, c| (0..a.shape().1).map(|k| a.get(r, k) * b.get(k, c)).sum())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d))
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..9, 1usize..9, 1usize..9).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))
}

proptest! {
    #[test]
    fn products_agree_with_the_triple_loop((a, b) in pair()) {
        let want = naive(&a, &b);
        let close = |x: &Matrix| x.zip_map(&want, |u, v| u - v).max_abs() < 1e-9;
        prop_assert!(close(&a.matmul(&b)));
        prop_assert!(close(&a.matmul_t(&b.transpose())));
        prop_assert!(close(&a.transpose().t_matmul(&b)));
    }
}
