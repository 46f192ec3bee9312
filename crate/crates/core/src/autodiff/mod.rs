//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: each recorded operation computes its
//! value immediately, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. The recurrent models in [`crate::rnn`] are unrolled
//! onto one tape so that a dropout mask registered as a single leaf collects
//! gradient contributions from every time step.

mod check;
mod graph;

pub use check::{finite_diff_check, numeric_gradient, rel_error, GradCheck, DEFAULT_STEP};
pub use graph::{Graph, NodeId, OpKind};
#[cfg(test)]
pub(crate) use graph::softmax_in_place;
pub(crate) use graph::xlogx;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_shape_rule() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 3]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.leaf(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sigmoid_and_softmax_reference_values() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let v = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let sm = g.softmax(v).unwrap();
        assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1000.0, 1000.0, -1000.0]));
        let sm = g.softmax(v).unwrap();
        let p = g.value(sm).data();
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
        let ls = g.log_softmax(v).unwrap();
        assert!((g.value(ls).data()[0] + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let root = g.sum(sq).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let root = g.mul(x, y).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).item(), 5.0);
        assert_eq!(g.grad(y).item(), 3.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // root = sum(x*x + x) → grad = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -1.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.add(xx, x).unwrap();
        let root = g.sum(s).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0]));
        let t = g.tanh(x).unwrap();
        let root = g.sum(t).unwrap();
        g.backward(root).unwrap();
        let once = g.grad(x);
        g.backward(root).unwrap();
        let twice = g.grad(x);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x), once);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let root = g.sum(p).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
        let d = g.detach(p);
        assert!(g.is_leaf(d));
    }

    #[test]
    fn xlogx_handles_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0, 0.5]));
        let y = g.xlogx(x).unwrap();
        assert_eq!(g.value(y).data()[..2], [0.0, 0.0]);
        let root = g.sum(y).unwrap();
        g.backward(root).unwrap();
        assert!(g.grad(x).all_finite());
    }

    #[test]
    fn finite_diff_of_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.0]);
        let check = finite_diff_check(|g, x| g.sum(x), &x, DEFAULT_STEP).unwrap();
        assert!(check.max_rel_error <= 1e-10, "{}", check.max_rel_error);
    }

    #[test]
    fn finite_diff_of_tanh_sum() {
        // d/dx Σ tanh(x) = 1 − tanh²(x); central differences with h = 1e-5
        // carry O(h²) ≈ 1e-10 truncation error here.
        let x = Tensor::vector(vec![0.3, -0.7]);
        let check = finite_diff_check(
            |g, x| {
                let t = g.tanh(x)?;
                g.sum(t)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-6, "{}", check.max_rel_error);
        let expected = [1.0 - 0.3f64.tanh().powi(2), 1.0 - 0.7f64.tanh().powi(2)];
        for (a, e) in check.analytic.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_of_sigmoid_matmul_chain() {
        let w = Tensor::matrix(3, 2, vec![0.4, -0.3, 1.1, 0.2, -0.8, 0.5]).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.9, -0.4, 1.2, -0.6, 0.3]).unwrap();
        let check = finite_diff_check(
            |g, x| {
                let w = g.constant(w.clone());
                let z = g.matmul(x, w)?;
                let s = g.sigmoid(z)?;
                g.sum(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-4);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_non_finite() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
        let err = finite_diff_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &Tensor::vector(vec![0.0]),
            1e-5,
        );
        assert!(err.is_err());
    }
}
