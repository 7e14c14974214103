//! Structural similarity with a separable Gaussian window, valid region only.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Window actually used on an `h×w` image: the configured size, or the
/// largest odd size that fits.
pub fn effective_window(h: usize, w: usize, size: usize) -> usize {
    let m = h.min(w).min(size).max(1);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

fn gaussian_window<T: Scalar>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

struct Plane {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Plane {
    fn blur<T: Scalar>(&self, src: &[T], win: &[T]) -> Vec<T> {
        let n = win.len();
        let mut tmp = vec![T::zero(); self.h * self.ow];
        for r in 0..self.h {
            let row = &src[r * self.w..(r + 1) * self.w];
            for ox in 0..self.ow {
                let mut acc = T::zero();
                for k in 0..n {
                    acc += win[k] * row[ox + k];
                }
                tmp[r * self.ow + ox] = acc;
            }
        }
        let mut out = vec![T::zero(); self.oh * self.ow];
        for oy in 0..self.oh {
            for k in 0..n {
                let wk = win[k];
                let src_row = &tmp[(oy + k) * self.ow..(oy + k + 1) * self.ow];
                let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                for (d, &s) in dst.iter_mut().zip(src_row) {
                    *d += wk * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`Plane::blur`].
    fn blur_adjoint<T: Scalar>(&self, g: &[T], win: &[T]) -> Vec<T> {
        let n = win.len();
        let mut tmp = vec![T::zero(); self.h * self.ow];
        for oy in 0..self.oh {
            for k in 0..n {
                let wk = win[k];
                let src = &g[oy * self.ow..(oy + 1) * self.ow];
                let dst = &mut tmp[(oy + k) * self.ow..(oy + k + 1) * self.ow];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wk * s;
                }
            }
        }
        let mut out = vec![T::zero(); self.h * self.w];
        for r in 0..self.h {
            for ox in 0..self.ow {
                let v = tmp[r * self.ow + ox];
                for k in 0..n {
                    out[r * self.w + ox + k] += win[k] * v;
                }
            }
        }
        out
    }
}

fn channel<T: Scalar>(img: &Array<T>, c: usize) -> Vec<T> {
    let ch = img.shape()[2];
    img.data().iter().skip(c).step_by(ch).copied().collect()
}

fn check<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    match a.shape() {
        [h, w, c] if *h > 0 && *w > 0 => Ok((*h, *w, *c)),
        s => Err(Error::shape("ssim", s, &[1, 1, 3])),
    }
}

/// Mean SSIM of two `H×W×C` images and, optionally, its gradient with
/// respect to `x`.
fn ssim_core<T: Scalar>(x: &Array<T>, y: &Array<T>, p: &SsimParams, grad: bool) -> Result<(T, Option<Vec<T>>)> {
    let (h, w, c) = check(x, y)?;
    let size = effective_window(h, w, p.window);
    let win: Vec<T> = gaussian_window(size, p.sigma);
    let plane = Plane {
        h,
        w,
        oh: h - size + 1,
        ow: w - size + 1,
    };
    let c1 = T::lit((p.k1).powi(2));
    let c2 = T::lit((p.k2).powi(2));
    let two = T::lit(2.0);
    let count = T::from_usize_lossy(plane.oh * plane.ow * c);
    let mut total = T::zero();
    let mut dx = grad.then(|| vec![T::zero(); x.len()]);
    for ch in 0..c {
        let xs = channel(x, ch);
        let ys = channel(y, ch);
        let xx: Vec<T> = xs.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = ys.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = xs.iter().zip(&ys).map(|(&a, &b)| a * b).collect();
        let mx = plane.blur(&xs, &win);
        let my = plane.blur(&ys, &win);
        let exx = plane.blur(&xx, &win);
        let eyy = plane.blur(&yy, &win);
        let exy = plane.blur(&xy, &win);
        let m = mx.len();
        let mut g_m = vec![T::zero(); m];
        let mut g_exx = vec![T::zero(); m];
        let mut g_exy = vec![T::zero(); m];
        for i in 0..m {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cov = exy[i] - mx[i] * my[i];
            let a = two * mx[i] * my[i] + c1;
            let b = two * cov + c2;
            let cc = mx[i] * mx[i] + my[i] * my[i] + c1;
            let d = vx + vy + c2;
            let s = (a * b) / (cc * d);
            total += s;
            if grad {
                let ds_dvx = -s / d;
                let ds_dcov = two * a / (cc * d);
                let ds_dmx = two * my[i] * b / (cc * d) - s * two * mx[i] / cc;
                g_m[i] = (ds_dmx + ds_dvx * (-two * mx[i]) + ds_dcov * (-my[i])) / count;
                g_exx[i] = ds_dvx / count;
                g_exy[i] = ds_dcov / count;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let a_m = plane.blur_adjoint(&g_m, &win);
            let a_xx = plane.blur_adjoint(&g_exx, &win);
            let a_xy = plane.blur_adjoint(&g_exy, &win);
            for j in 0..h * w {
                dx[j * c + ch] = a_m[j] + two * xs[j] * a_xx[j] + ys[j] * a_xy[j];
            }
        }
    }
    Ok((total / count, dx))
}

/// Mean SSIM of two `H×W×C` images.
pub fn ssim_value<T: Scalar>(x: &Array<T>, y: &Array<T>, p: &SsimParams) -> Result<T> {
    Ok(ssim_core(x, y, p, false)?.0)
}

/// Records mean SSIM of `x` and `y` as a scalar node.
pub fn ssim_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let v = ssim_value(tape.value(x), tape.value(y), p)?;
    tape.custom(&[x, y], Array::scalar(v), Box::new(SsimOp { params: *p }))
}

struct SsimOp {
    params: SsimParams,
}

impl<T: Scalar> CustomOp<T> for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad_output: &Array<T>,
    ) -> Result<Vec<Option<Array<T>>>> {
        let g = grad_output.item();
        let (x, y) = (inputs[0], inputs[1]);
        let scale = |d: Vec<T>| Array::new(x.shape().to_vec(), d.into_iter().map(|v| v * g).collect());
        let (_, dx) = ssim_core(x, y, &self.params, true)?;
        let (_, dy) = ssim_core(y, x, &self.params, true)?;
        Ok(vec![
            Some(scale(dx.expect("requested"))?),
            Some(scale(dy.expect("requested"))?),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference_report, ProbePlan};

    #[test]
    fn window_shrinks_to_fit() {
        assert_eq!(effective_window(32, 32, 11), 11);
        assert_eq!(effective_window(8, 9, 11), 7);
        assert_eq!(effective_window(1, 5, 11), 1);
    }

    #[test]
    fn blur_adjoint_identity() {
        let plane = Plane {
            h: 6,
            w: 7,
            oh: 2,
            ow: 3,
        };
        let win: Vec<f64> = gaussian_window(5, 1.5);
        let a: Vec<f64> = (0..42).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..6).map(|i| (i as f64 * 1.1).cos()).collect();
        let lhs: f64 = plane.blur(&a, &win).iter().zip(&g).map(|(x, y)| x * y).sum();
        let rhs: f64 = plane.blur_adjoint(&g, &win).iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_fd() {
        let x = Array::from_fn(vec![9, 8, 2], |i| ((i * 31 % 23) as f64) / 23.0);
        let y = Array::from_fn(vec![9, 8, 2], |i| ((i * 17 % 29) as f64) / 29.0);
        let p = SsimParams::default();
        let errs = finite_difference_report(
            |t, v| ssim_on_tape(t, v[0], v[1], &p),
            &[x, y],
            1e-6,
            ProbePlan::default(),
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
    }
}
