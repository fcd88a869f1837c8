//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` arrays. Every operation on a [`Graph`] appends a
//! node; [`Graph::backward`] sweeps the tape in reverse and accumulates
//! gradients additively, so gradients are deterministic for a fixed op order.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod gru;
mod kernels;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_coords, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use gru::{GateInputs, GruCell};
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_then_scatter_doubles_row() {
        let mut g = Graph::new();
        let a = g.constant(m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.gather_rows(a, &[1, 1]).unwrap();
        let back = g.scatter_add_rows(rows, &[1, 1], 3).unwrap();
        assert_eq!(g.value(back).data(), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.gather_rows(a, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn scatter_max_leaves_empty_rows_zero() {
        let mut g = Graph::new();
        let a = g.input(m(3, 2, &[1.0, -5.0, 3.0, -7.0, 2.0, -6.0]));
        let out = g.scatter_max_rows(a, &[0, 0, 2], 3).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, -5.0, 0.0, 0.0, 2.0, -6.0]);
        let s = g.sum_all(out);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(a).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-300);
        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(
            g.softmax(x, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let x = g.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum_all(wx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);

        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn leading_dim_broadcast() {
        let mut g = Graph::new();
        let a = g.input(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(Tensor::vector(vec![10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..4 * 4 * 2).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(Tensor::new(&[4, 4, 2], data).unwrap());
        let k = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_ones_kernel_zero_padding() {
        let mut g = Graph::new();
        let c = 2.0;
        let x = g.constant(Tensor::full(&[4, 4, 1], c));
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1).unwrap();
        let v = g.value(y).data();
        // corners see 4 taps, edges 6, interior 9
        assert_eq!(v[0], 4.0 * c);
        assert_eq!(v[1], 6.0 * c);
        assert_eq!(v[5], 9.0 * c);
        assert_eq!(v[15], 4.0 * c);
    }

    #[test]
    fn conv_stride_then_upsample_keeps_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[8, 6, 3], 1.0));
        let k = g.constant(Tensor::full(&[3, 3, 3, 5], 0.1));
        let y = g.conv2d(x, k, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 3, 5]);
        let up = g.upsample2x(y).unwrap();
        assert_eq!(g.shape(up), &[8, 6, 5]);
        let odd = g.constant(Tensor::full(&[5, 4, 3], 1.0));
        assert!(g.conv2d(odd, k, 2).is_err());
    }

    #[test]
    fn segment_softmax_groups() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 5.0, 2f64.ln(), 0.0]));
        let y = g.segment_softmax(x, &[0, 0, 1, 2, 2], 3).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[2], 1.0);
        assert!((v[3] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let at = Tensor::vector(vec![0.3, -1.2, 2.5, 0.7]);
        let rep = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &at,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.max_rel_error <= 1e-8);
    }

    #[test]
    fn grad_check_skips_relu_kink() {
        let at = Tensor::vector(vec![0.0, 1.0, -1.0]);
        let rep = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum_all(r))
            },
            &at,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.skipped, vec![0]);
        assert_eq!(rep.checked, 2);
        assert!(rep.passed());
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let at = Tensor::vector(vec![1.0]);
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                let d = g.div(x, z)?;
                Ok(g.sum_all(d))
            },
            &at,
            1e-6,
            1e-4,
        );
        assert!(matches!(err, Err(TensorError::NonFinite(_))));
    }
}
