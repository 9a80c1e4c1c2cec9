//! Eager versions of the differentiable ops, for callers that do not need gradients.

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn linear_map(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.matmul(a, b)?;
    Ok(g.value(y).clone())
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    crate::graph::softmax_rows(x)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gn, b) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(x, gn, b, eps)?;
    Ok(g.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let n = g.constant(x.clone());
    let y = g.gelu(n);
    g.value(y).clone()
}

pub fn mean_pool_rows(x: &Tensor) -> Result<Tensor> {
    crate::graph::mean_rows(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_map_examples() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(linear_map(&Tensor::identity(2), &m).unwrap(), m);
        assert_eq!(
            linear_map(&t(&[&[1.0, 0.0]]), &t(&[&[2.0], &[5.0]])).unwrap().data(),
            &[2.0]
        );
        let ones = Tensor::filled(2, 2, 1.0);
        assert_eq!(linear_map(&ones, &ones).unwrap(), Tensor::filled(2, 2, 2.0));
    }

    #[test]
    fn linear_map_shape_error_names_both_shapes() {
        let err = linear_map(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            crate::Error::Shape {
                op: "linear_map",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&t(&[&[0.0, 0.0]])).data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[&[7.5, 7.5, 7.5]]));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&t(&[&[0.0, math::ln(3.0)]]));
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let g1 = Tensor::filled(1, 2, 1.0);
        let b0 = Tensor::zeros(1, 2);
        let y = layer_norm(&Tensor::filled(1, 4, 3.3), &Tensor::filled(1, 4, 1.0), &Tensor::zeros(1, 4), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let y = layer_norm(&t(&[&[-1.0, 1.0]]), &g1, &b0, 1e-300).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let y = layer_norm(&t(&[&[0.0, 2.0]]), &Tensor::filled(1, 2, 2.0), &Tensor::filled(1, 2, 1.0), 1e-300)
            .unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&t(&[&[0.0, 1.0, 6.0, 9.0]]));
        assert_eq!(y.data()[0], 0.0);
        // Φ(1) = 0.841344746068543 (erf oracle)
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] - 6.0).abs() < 1e-6);
        assert!((y.data()[3] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool_rows(&t(&[&[1.0, 3.0], &[3.0, 5.0]])).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(mean_pool_rows(&t(&[&[1.5, -2.0]])).unwrap().data(), &[1.5, -2.0]);
        assert_eq!(
            mean_pool_rows(&t(&[&[0.0, 0.0], &[6.0, -3.0], &[0.0, 0.0]])).unwrap().data(),
            &[2.0, -1.0]
        );
        assert_eq!(mean_pool_rows(&Tensor::zeros(0, 3)), Err(crate::Error::EmptyPool));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-30.0f64..30.0, rows * cols)
            .prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(x in matrix(3, 5), c in -50.0f64..50.0) {
            let y = softmax_rows(&x);
            for r in 0..3 {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(y.row(r).iter().all(|v| *v > 0.0));
            }
            let shifted = Tensor::new(3, 5, x.data().iter().map(|v| v + c).collect()).unwrap();
            prop_assert!(softmax_rows(&shifted).max_abs_diff(&y) < 1e-12);
        }

        #[test]
        fn layer_norm_standardizes(x in matrix(4, 6)) {
            let y = layer_norm(&x, &Tensor::filled(1, 6, 1.0), &Tensor::zeros(1, 6), LAYER_NORM_EPS).unwrap();
            for r in 0..4 {
                let row = y.row(r);
                let mean = row.iter().sum::<f64>() / 6.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                prop_assert!(mean.abs() < 1e-9);
                let xr = x.row(r);
                let xm = xr.iter().sum::<f64>() / 6.0;
                let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 6.0;
                prop_assert!((var - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-9);
            }
        }

        #[test]
        fn gelu_odd_part_is_identity(x in -40.0f64..40.0) {
            let y = gelu(&Tensor::row_vector(alloc::vec![x, -x]).unwrap());
            prop_assert!((y.data()[0] - y.data()[1] - x).abs() < 1e-12);
        }

        #[test]
        fn ops_are_deterministic(x in matrix(3, 4), w in matrix(4, 2)) {
            prop_assert_eq!(linear_map(&x, &w).unwrap(), linear_map(&x, &w).unwrap());
            prop_assert_eq!(gelu(&x), gelu(&x));
        }
    }

    #[test]
    fn gelu_is_monotone_on_grid() {
        // GELU has its minimum near -0.7518; it is non-decreasing to the right of it.
        let xs: alloc::vec::Vec<f64> = (0..2000).map(|i| -0.75 + i as f64 * 0.005).collect();
        let y = gelu(&Tensor::row_vector(xs).unwrap());
        for w in y.data().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }
}
