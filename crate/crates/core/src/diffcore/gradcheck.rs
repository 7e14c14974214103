//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which entries of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbePlan {
    /// Probe at most this many entries per parameter (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for ProbePlan {
    fn default() -> Self {
        Self {
            max_entries: None,
            seed: 0,
        }
    }
}

fn evaluate<T, F>(f: &F, params: &[Array<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn scalar_value<T, F>(f: &F, params: &[Array<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, params)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFiniteValue { op: "finite_difference" });
    }
    Ok(v)
}

/// Relative discrepancy used by every gradient check:
/// `|a − c| / (|a| + |c| + eps)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T, eps: T) -> T {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + eps)
}

/// Max relative error per parameter between tape gradients and central
/// differences of `f`.
pub fn finite_difference_report<T, F>(
    f: F,
    params: &[Array<T>],
    eps: T,
    plan: ProbePlan,
) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (mut tape, vars, out) = evaluate(&f, params)?;
    tape.backward(out)?;
    let analytic: Vec<Array<T>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut probe = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let n = param.len();
        let entries: Vec<usize> = match plan.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut worst = T::zero();
        for i in entries {
            let x0 = param.data()[i];
            probe[pi].data_mut()[i] = x0 + eps;
            let fp = scalar_value(&f, &probe)?;
            probe[pi].data_mut()[i] = x0 - eps;
            let fm = scalar_value(&f, &probe)?;
            probe[pi].data_mut()[i] = x0;
            let numeric = (fp - fm) / (eps + eps);
            let err = relative_error(analytic[pi].data()[i], numeric, eps);
            if err > worst {
                worst = err;
            }
        }
        report.push(worst);
    }
    Ok(report)
}

/// Max relative error over all parameters and entries.
pub fn finite_difference_check<T, F>(f: F, params: &[Array<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let report = finite_difference_report(f, params, eps, ProbePlan::default())?;
    Ok(report.into_iter().fold(T::zero(), |m, e| if e > m { e } else { m }))
}
