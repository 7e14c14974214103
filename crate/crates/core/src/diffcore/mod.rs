//! Reverse-mode differentiation over dense real arrays.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{
    finite_difference_check, finite_difference_report, relative_error, ProbePlan,
};
pub use tape::{CustomOp, Tape, Unary, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn max_pool_axis0_is_elementwise_max() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 2], &[1.0, 5.0, 3.0, 2.0])).unwrap();
        let m = t.max_pool(x, 0).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        assert_eq!(t.shape(m), &[2]);
    }

    #[test]
    fn concat_axis1_shape() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Array::zeros(vec![1, 4])).unwrap();
        let b = t.constant(Array::zeros(vec![1, 2])).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[1, 6]);
    }

    #[test]
    fn concat_interleaves_rows() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = t.constant(arr(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Array::<f64>::zeros(vec![2, 3])).unwrap();
        let b = t.constant(Array::zeros(vec![3, 2])).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[1], &[1000.0])).unwrap();
        assert!(matches!(t.exp(a), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Array::<f64>::zeros(vec![2])).unwrap();
        assert!(matches!(t.backward(a), Err(Error::NotScalarLoss(_))));
    }

    #[test]
    fn exp_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(0.0f64)).unwrap();
        let y = t.exp(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn relu_gradient_is_positive_indicator() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[5], &[-2.0, -0.5, 0.0, 0.5, 3.0])).unwrap();
        let r = t.relu(x).unwrap();
        let s = t.sum_all(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[3, 2], &[4.0, 1.0, 4.0, 7.0, 2.0, 7.0])).unwrap();
        let m = t.max_pool(x, 0).unwrap();
        let s = t.sum_all(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(
            t.grad(x).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0])).unwrap();
        let unused = t.leaf(arr(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = t.square(x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_or_zeros(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin())).unwrap();
        let x = t.constant(Array::from_fn(vec![2, 3], |i| i as f64 - 2.5)).unwrap();
        let h = t.matmul(x, w).unwrap();
        let h = t.tanh(h).unwrap();
        let l = t.sum_all(h).unwrap();
        t.backward(l).unwrap();
        let g1 = t.grad(w).unwrap().clone();
        t.zero_grad();
        t.backward(l).unwrap();
        let g2 = t.grad(w).unwrap();
        assert!(g1
            .data()
            .iter()
            .zip(g2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = arr(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let b = arr(&[3, 1], &[1.5, -0.3, 0.8]);
        let err = finite_difference_check(
            |t, p| {
                let c = t.matmul(p[0], p[1])?;
                let c = t.square(c)?;
                t.sum_all(c)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        let x = Array::from_fn(vec![4, 3], |i| ((i * 7 % 11) as f64) / 5.0 - 1.0);
        let w1 = Array::from_fn(vec![3, 5], |i| ((i as f64) * 0.61).sin());
        let b1 = Array::from_fn(vec![5], |i| 0.1 * i as f64 - 0.2);
        let w2 = Array::from_fn(vec![5, 2], |i| ((i as f64) * 1.3).cos());
        let b2 = Array::from_fn(vec![2], |i| 0.05 * i as f64);
        let err = finite_difference_check(
            move |t, p| {
                let xin = t.constant(x.clone())?;
                let h = t.matmul(xin, p[0])?;
                let h = t.add(h, p[1])?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, p[2])?;
                let o = t.add(o, p[3])?;
                let o = t.square(o)?;
                t.mean_all(o)
            },
            &[w1, b1, w2, b2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let x = Array::from_fn(vec![2, 3, 4], |i| ((i as f64) * 0.73).sin() * 1.7 + 0.05);
        let y = Array::from_fn(vec![4], |i| 0.3 + i as f64 * 0.2);
        let err = finite_difference_check(
            |t, p| {
                let a = t.mul(p[0], p[1])?;
                let b = t.sub(a, p[1])?;
                let c = t.sin(b)?;
                let d = t.cos(p[0])?;
                let e = t.concat(&[c, d], 2)?;
                let f = t.max_pool(e, 1)?;
                let g = t.slice(f, 1, 1, 6)?;
                let h = t.normalize_l2(g)?;
                let i = t.reshape(h, vec![10])?;
                let j = t.gather(i, &[0, 3, 3, 9])?;
                let k = t.broadcast(j, vec![3, 4])?;
                let l = t.sum(k, 0)?;
                let m = t.sigmoid(l)?;
                let n = t.exp(m)?;
                let o = t.abs(p[1])?;
                let q = t.add(n, o)?;
                let r = t.scale(q, 0.5)?;
                t.sum_all(r)
            },
            &[x, y],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn quadratic_check_is_nearly_exact() {
        let err = finite_difference_check(
            |t, p| {
                let s = t.square(p[0])?;
                t.sum_all(s)
            },
            &[Array::scalar(3.0f64)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |t, _| t.scalar(4.0),
            &[Array::from_fn(vec![3], |i| i as f64)],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn trailing_broadcast_in_binary_ops() {
        let mut t = Tape::new();
        let a = t.leaf(Array::from_fn(vec![2, 3], |i| i as f64)).unwrap();
        let b = t.leaf(arr(&[3], &[10.0, 20.0, 30.0])).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = t.sum_all(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
