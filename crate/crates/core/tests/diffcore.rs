use dn4dgs::diffcore::{finite_difference_check, finite_difference_report, ProbePlan};
use dn4dgs::gaussians::{build_covariance, opacity_at};
use dn4dgs::linalg::inverse3;
use dn4dgs::{Array, Error, Tape, Var};
use proptest::prelude::*;

/// `σ·exp(−½ dᵀ Σ⁻¹ d)` with `d = x − μ`, recorded from primitive ops.
fn opacity_on_tape(tape: &mut Tape<f64>, x: Var, mu: Var, inv: &[[f64; 3]; 3], sigma: f64) -> dn4dgs::Result<Var> {
    let d = tape.sub(x, mu)?;
    let m = tape.constant(Array::new(vec![3, 3], inv.concat())?)?;
    let dm = tape.matmul(d, m)?;
    let prod = tape.mul(dm, d)?;
    let q = tape.sum_all(prod)?;
    let e = tape.scale(q, -0.5)?;
    let e = tape.exp(e)?;
    tape.scale(e, sigma)
}

#[test]
fn opacity_gradient_wrt_mean_matches_finite_differences() {
    let cov = build_covariance([0.9, 0.2, -0.3, 0.1], [-0.4, 0.1, -0.9]);
    let inv = inverse3(&cov).unwrap();
    let x = Array::new(vec![1, 3], vec![0.3, -0.2, 0.5]).unwrap();
    let mu = Array::new(vec![1, 3], vec![0.1, 0.05, 0.2]).unwrap();
    let err = finite_difference_check(
        |t, v| {
            let xv = t.constant(x.clone())?;
            opacity_on_tape(t, xv, v[0], &inv, 0.7)
        },
        &[mu.clone()],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let mv = tape.constant(mu.clone()).unwrap();
    let o = opacity_on_tape(&mut tape, xv, mv, &inv, 0.7).unwrap();
    let direct = opacity_at([0.3, -0.2, 0.5], [0.1, 0.05, 0.2], &cov, 0.7);
    assert!((tape.value(o).item() - direct).abs() < 1e-14);
}

#[test]
fn matmul_of_two_by_three_and_three_by_one() {
    let a = Array::from_fn(vec![2, 3], |i| 0.3 * i as f64 - 0.4);
    let b = Array::from_fn(vec![3, 1], |i| 1.0 - 0.7 * i as f64);
    let report = finite_difference_report(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum_all(y)
        },
        &[a, b],
        1e-6,
        ProbePlan::default(),
    )
    .unwrap();
    assert!(report.iter().all(|&e| e < 1e-6), "{report:?}");
}

#[test]
fn max_pool_and_concat_examples() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Array::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap()).unwrap();
    let m = t.max_pool(a, 0).unwrap();
    assert_eq!(t.value(m).data(), &[3.0, 5.0]);
    let x = t.constant(Array::zeros(vec![1, 4])).unwrap();
    let y = t.constant(Array::zeros(vec![1, 2])).unwrap();
    let c = t.concat(&[x, y], 1).unwrap();
    assert_eq!(t.shape(c), &[1, 6]);
    let bad = t.constant(Array::zeros(vec![2, 2])).unwrap();
    assert!(matches!(t.concat(&[x, bad], 1), Err(Error::ShapeMismatch { .. })));
    let s = t.sum_all(m).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

fn composite(t: &mut Tape<f64>, v: &[Var]) -> dn4dgs::Result<Var> {
    let h = t.matmul(v[0], v[1])?;
    let h = t.tanh(h)?;
    let s = t.sin(h)?;
    let p = t.max_pool(s, 0)?;
    let n = t.normalize_l2(v[1])?;
    let n = t.sum_all(n)?;
    let p = t.sum_all(p)?;
    let c = t.cos(p)?;
    t.add(c, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_have_value_shapes_and_repeat_bitwise(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let mut tape = Tape::new();
        let va = tape.leaf(Array::new(vec![3, 4], a).unwrap()).unwrap();
        let vb = tape.leaf(Array::new(vec![4, 2], b).unwrap()).unwrap();
        let out = composite(&mut tape, &[va, vb]).unwrap();
        tape.backward(out).unwrap();
        let first: Vec<Array<f64>> = [va, vb].iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        for (v, g) in [va, vb].iter().zip(&first) {
            prop_assert_eq!(g.shape(), tape.shape(*v));
        }
        tape.zero_grad();
        tape.backward(out).unwrap();
        prop_assert_eq!(tape.grad(va).unwrap(), &first[0]);
        prop_assert_eq!(tape.grad(vb).unwrap(), &first[1]);
    }

    #[test]
    fn scaling_the_loss_scales_every_gradient(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        c in -4.0f64..4.0,
    ) {
        let b = Array::from_fn(vec![4, 2], |i| 0.25 * i as f64 - 0.8);
        let grads = |k: f64| {
            let mut tape = Tape::new();
            let va = tape.leaf(Array::new(vec![3, 4], a.clone()).unwrap()).unwrap();
            let vb = tape.leaf(b.clone()).unwrap();
            let out = composite(&mut tape, &[va, vb]).unwrap();
            let out = tape.scale(out, k).unwrap();
            tape.backward(out).unwrap();
            tape.grad_or_zeros(va)
        };
        let (g1, gc) = (grads(1.0), grads(c));
        for (x, y) in g1.data().iter().zip(gc.data()) {
            prop_assert!((x * c - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
