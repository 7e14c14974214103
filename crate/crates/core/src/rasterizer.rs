//! Depth-sorted front-to-back α-blending of projected gaussians.
//!
//! Every gaussian in front of the near plane is projected, sorted globally by
//! camera-space depth of its mean and splatted onto the pixels inside its 3σ
//! ellipse. Per pixel,
//!
//! ```text
//! C(u) = Σᵢ Tᵢ αᵢ cᵢ + T_final · background,   Tᵢ = Πⱼ<ᵢ (1 − αⱼ)
//! ```
//!
//! with `αᵢ = min(0.99, σᵢ exp(−½ dᵀ Σ2d⁻¹ d))`. A pixel stops accepting
//! splats once the next one would push its transmittance below `1e-4`.
//!
//! The tape op ([`render_on_tape`]) carries a hand-written backward pass that
//! returns gradients for positions, rotations, log-scales, opacity logits
//! and SH coefficients.

use crate::diffcore::{Array, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussians::sh::{basis, basis_jacobian};
use crate::gaussians::{
    build_covariance, normalize_quat, perspective_jacobian, project, rotation_from_unit_quat,
    Camera, CloudVars, GaussianCloud,
};
use crate::linalg::{inverse2, norm3, sub3, Mat3};
use crate::scalar::Scalar;

/// Upper bound on per-splat opacity.
pub const ALPHA_MAX: f64 = 0.99;
/// A pixel stops blending once transmittance would fall below this.
pub const T_MIN: f64 = 1e-4;
/// Footprint radius in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

/// An `H×W×3` color image with its `H×W` accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage<T> {
    pub rgb: Array<T>,
    pub alpha: Array<T>,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }
}

/// One blended splat at one pixel, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelContribution<T> {
    pub gaussian: usize,
    pub alpha: T,
    pub transmittance: T,
}

/// Borrowed attribute arrays in the layout of [`GaussianCloud`].
#[derive(Clone, Copy)]
struct Attributes<'a, T> {
    mu: &'a [T],
    q: &'a [T],
    s: &'a [T],
    logit: &'a [T],
    h: &'a [T],
    sh_count: usize,
}

impl<'a, T: Scalar> Attributes<'a, T> {
    fn len(&self) -> usize {
        self.mu.len() / 3
    }

    fn mu(&self, i: usize) -> [T; 3] {
        [self.mu[3 * i], self.mu[3 * i + 1], self.mu[3 * i + 2]]
    }

    fn q(&self, i: usize) -> [T; 4] {
        [self.q[4 * i], self.q[4 * i + 1], self.q[4 * i + 2], self.q[4 * i + 3]]
    }

    fn s(&self, i: usize) -> [T; 3] {
        [self.s[3 * i], self.s[3 * i + 1], self.s[3 * i + 2]]
    }

    fn sh(&self, i: usize) -> &'a [T] {
        let w = self.sh_count * 3;
        &self.h[i * w..(i + 1) * w]
    }

    fn from_arrays(
        mu: &'a Array<T>,
        q: &'a Array<T>,
        s: &'a Array<T>,
        logit: &'a Array<T>,
        h: &'a Array<T>,
    ) -> Result<Self> {
        let n = mu.shape().first().copied().unwrap_or(0);
        let expect = |a: &Array<T>, w: usize, name: &'static str| -> Result<()> {
            if a.len() != n * w || a.shape().first().copied().unwrap_or(0) != n {
                return Err(Error::shape(name, a.shape(), &[n, w]));
            }
            Ok(())
        };
        expect(mu, 3, "render.mu")?;
        expect(q, 4, "render.q")?;
        expect(s, 3, "render.s")?;
        expect(logit, 1, "render.sigma_logit")?;
        let sh_count = if n == 0 {
            h.shape().get(1).copied().unwrap_or(1)
        } else {
            h.len() / (3 * n)
        };
        expect(h, 3 * sh_count, "render.h")?;
        Ok(Self {
            mu: mu.data(),
            q: q.data(),
            s: s.data(),
            logit: logit.data(),
            h: h.data(),
            sh_count,
        })
    }
}

/// Screen-space state of one gaussian.
#[derive(Clone, Debug)]
struct Splat<T> {
    index: usize,
    mean2d: [T; 2],
    /// Inverse 2D covariance `(a, b, c)` = `[[a, b], [b, c]]`.
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
    depth: T,
    bbox: [usize; 4],
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn view_direction<T: Scalar>(mu: [T; 3], cam_center: [T; 3]) -> ([T; 3], T) {
    let d = sub3(mu, cam_center);
    let n = norm3(d);
    if n == T::zero() {
        return ([T::zero(), T::zero(), T::one()], T::one());
    }
    (d.map(|v| v / n), n)
}

fn sh_rows<T: Scalar>(flat: &[T]) -> Vec<[T; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn preprocess<T: Scalar>(attrs: &Attributes<T>, i: usize, cam: &Camera<T>) -> Option<Splat<T>> {
    let mu = attrs.mu(i);
    let cov = build_covariance(attrs.q(i), attrs.s(i));
    let proj = project(mu, &cov, cam).ok()?;
    let inv = inverse2(&proj.cov2d)?;
    let (v, _) = view_direction(mu, cam.center());
    let color = crate::gaussians::sh_color(&sh_rows(attrs.sh(i)), v);
    // bounding box of the 3σ ellipse
    let (a, b, c) = (proj.cov2d[0][0], proj.cov2d[0][1], proj.cov2d[1][1]);
    let mid = (a + c) * T::lit(0.5);
    let disc = (mid * mid - (a * c - b * b)).max(T::zero()).sqrt();
    let lambda_max = mid + disc;
    let radius = (T::lit(FOOTPRINT_SIGMAS) * lambda_max.sqrt()).ceil() + T::one();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mx = proj.mean2d[0].to_f64_lossy();
    let my = proj.mean2d[1].to_f64_lossy();
    let r = radius.to_f64_lossy();
    if !(mx.is_finite() && my.is_finite() && r.is_finite()) {
        return None;
    }
    let x0 = (mx - r).max(0.0).ceil();
    let x1 = (mx + r).min(w - 1.0).floor();
    let y0 = (my - r).max(0.0).ceil();
    let y1 = (my + r).min(h - 1.0).floor();
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Splat {
        index: i,
        mean2d: proj.mean2d,
        conic: [inv[0][0], inv[0][1], inv[1][1]],
        opacity: sigmoid(attrs.logit[i]),
        color,
        depth: proj.depth,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Exponent `−½ dᵀ Σ2d⁻¹ d` of a splat at pixel `(px, py)`.
#[inline]
fn splat_power<T: Scalar>(s: &Splat<T>, px: usize, py: usize) -> (T, T, T) {
    let dx = T::from_usize_lossy(px) - s.mean2d[0];
    let dy = T::from_usize_lossy(py) - s.mean2d[1];
    let [a, b, c] = s.conic;
    let power = T::lit(-0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy;
    (power, dx, dy)
}

/// Everything the backward pass needs from the forward pass.
struct Trace<T> {
    splats: Vec<Splat<T>>,
    /// Per-pixel splat slots in depth order, CSR layout.
    offsets: Vec<usize>,
    entries: Vec<u32>,
    /// Number of entries blended before early termination.
    used: Vec<usize>,
    t_final: Vec<T>,
}

fn rasterize<T: Scalar>(
    attrs: &Attributes<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> (Vec<T>, Vec<T>, Trace<T>) {
    let mut splats: Vec<Splat<T>> = (0..attrs.len())
        .filter_map(|i| preprocess(attrs, i, cam))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });

    let (w, h) = (cam.width, cam.height);
    let cutoff = T::lit(-0.5 * FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS);
    let mut counts = vec![0usize; w * h];
    let mut hits: Vec<(usize, u32)> = Vec::new();
    for (slot, s) in splats.iter().enumerate() {
        for py in s.bbox[2]..=s.bbox[3] {
            for px in s.bbox[0]..=s.bbox[1] {
                let (power, _, _) = splat_power(s, px, py);
                if power >= cutoff {
                    hits.push((py * w + px, slot as u32));
                    counts[py * w + px] += 1;
                }
            }
        }
    }
    let mut offsets = vec![0usize; w * h + 1];
    for p in 0..w * h {
        offsets[p + 1] = offsets[p] + counts[p];
    }
    let mut fill = offsets.clone();
    let mut entries = vec![0u32; hits.len()];
    // hits are produced in depth order, so each pixel list stays sorted
    for (p, slot) in hits {
        entries[fill[p]] = slot;
        fill[p] += 1;
    }

    let alpha_max = T::lit(ALPHA_MAX);
    let t_min = T::lit(T_MIN);
    let mut rgb = vec![T::zero(); w * h * 3];
    let mut alpha_img = vec![T::zero(); w * h];
    let mut used = vec![0usize; w * h];
    let mut t_final = vec![T::one(); w * h];
    for p in 0..w * h {
        let (px, py) = (p % w, p / w);
        let mut t = T::one();
        let mut c = [T::zero(); 3];
        let mut n_used = 0;
        for &slot in &entries[offsets[p]..offsets[p + 1]] {
            let s = &splats[slot as usize];
            let (power, _, _) = splat_power(s, px, py);
            let alpha = (s.opacity * power.exp()).min(alpha_max);
            let t_next = t * (T::one() - alpha);
            if t_next < t_min {
                break;
            }
            let weight = alpha * t;
            for ch in 0..3 {
                c[ch] = c[ch] + s.color[ch] * weight;
            }
            t = t_next;
            n_used += 1;
        }
        for ch in 0..3 {
            rgb[p * 3 + ch] = c[ch] + t * background[ch];
        }
        alpha_img[p] = T::one() - t;
        used[p] = n_used;
        t_final[p] = t;
    }
    (
        rgb,
        alpha_img,
        Trace {
            splats,
            offsets,
            entries,
            used,
            t_final,
        },
    )
}

fn render_attrs<T: Scalar>(
    attrs: &Attributes<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<(RenderedImage<T>, Trace<T>)> {
    let (rgb, alpha, trace) = rasterize(attrs, cam, background);
    Ok((
        RenderedImage {
            rgb: Array::new(vec![cam.height, cam.width, 3], rgb)?,
            alpha: Array::new(vec![cam.height, cam.width], alpha)?,
        },
        trace,
    ))
}

/// Renders a cloud without recording gradients.
pub fn render<T: Scalar>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<RenderedImage<T>> {
    let attrs = Attributes::from_arrays(&cloud.mu, &cloud.q, &cloud.s, &cloud.sigma_logit, &cloud.h)?;
    Ok(render_attrs(&attrs, cam, background)?.0)
}

/// Per-pixel blending record (row-major pixels) and final transmittance.
pub fn render_trace<T: Scalar>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
) -> Result<(Vec<Vec<PixelContribution<T>>>, Vec<T>)> {
    let attrs = Attributes::from_arrays(&cloud.mu, &cloud.q, &cloud.s, &cloud.sigma_logit, &cloud.h)?;
    let (_, trace) = render_attrs(&attrs, cam, [T::zero(); 3])?;
    let w = cam.width;
    let alpha_max = T::lit(ALPHA_MAX);
    let lists = (0..cam.pixel_count())
        .map(|p| {
            let mut t = T::one();
            trace.entries[trace.offsets[p]..trace.offsets[p] + trace.used[p]]
                .iter()
                .map(|&slot| {
                    let s = &trace.splats[slot as usize];
                    let (power, _, _) = splat_power(s, p % w, p / w);
                    let alpha = (s.opacity * power.exp()).min(alpha_max);
                    let c = PixelContribution {
                        gaussian: s.index,
                        alpha,
                        transmittance: t,
                    };
                    t = t * (T::one() - alpha);
                    c
                })
                .collect()
        })
        .collect();
    Ok((lists, trace.t_final))
}

/// Renders tape-resident attributes; the returned `H×W×3` node
/// differentiates back to `mu`, `q`, `s`, `sigma_logit` and `h`.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cloud: &CloudVars,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<(Var, RenderedImage<T>)> {
    let inputs = [cloud.mu, cloud.q, cloud.s, cloud.sigma_logit, cloud.h];
    let attrs = Attributes::from_arrays(
        tape.value(cloud.mu),
        tape.value(cloud.q),
        tape.value(cloud.s),
        tape.value(cloud.sigma_logit),
        tape.value(cloud.h),
    )?;
    let (image, trace) = render_attrs(&attrs, cam, background)?;
    let op = RenderOp {
        cam: cam.clone(),
        background,
        trace,
    };
    let var = tape.custom(&inputs, image.rgb.clone(), Box::new(op))?;
    Ok((var, image))
}

struct RenderOp<T> {
    cam: Camera<T>,
    background: [T; 3],
    trace: Trace<T>,
}

/// Gradients accumulated per splat in screen space.
#[derive(Clone, Copy, Default)]
struct SplatGrad<T> {
    mean2d: [T; 2],
    /// d/d(a, b, c) of the conic.
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
}

impl<T: Scalar> CustomOp<T> for RenderOp<T> {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad_output: &Array<T>,
    ) -> Result<Vec<Option<Array<T>>>> {
        let attrs = Attributes::from_arrays(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4])?;
        let tr = &self.trace;
        let w = self.cam.width;
        let g = grad_output.data();
        let alpha_max = T::lit(ALPHA_MAX);
        let zero = T::zero();
        let mut sg = vec![
            SplatGrad {
                mean2d: [zero; 2],
                conic: [zero; 3],
                opacity: zero,
                color: [zero; 3],
            };
            tr.splats.len()
        ];

        let mut alphas: Vec<(T, T, bool)> = Vec::new();
        for p in 0..self.cam.pixel_count() {
            let (px, py) = (p % w, p / w);
            let gp = [g[3 * p], g[3 * p + 1], g[3 * p + 2]];
            if gp.iter().all(|&v| v == zero) {
                continue;
            }
            let list = &tr.entries[tr.offsets[p]..tr.offsets[p] + tr.used[p]];
            // replay forward transmittances
            alphas.clear();
            let mut t = T::one();
            for &slot in list {
                let s = &tr.splats[slot as usize];
                let (power, _, _) = splat_power(s, px, py);
                let raw = s.opacity * power.exp();
                let clamped = raw > alpha_max;
                let alpha = raw.min(alpha_max);
                alphas.push((alpha, t, clamped));
                t = t * (T::one() - alpha);
            }
            let t_final = tr.t_final[p];
            let mut acc = [
                t_final * self.background[0],
                t_final * self.background[1],
                t_final * self.background[2],
            ];
            for (k, &slot) in list.iter().enumerate().rev() {
                let s = &tr.splats[slot as usize];
                let (alpha, t_k, clamped) = alphas[k];
                let weight = alpha * t_k;
                let grad = &mut sg[slot as usize];
                let mut dalpha = zero;
                let inv_one_minus = T::one() / (T::one() - alpha);
                for ch in 0..3 {
                    grad.color[ch] += weight * gp[ch];
                    dalpha += (t_k * s.color[ch] - acc[ch] * inv_one_minus) * gp[ch];
                    acc[ch] += weight * s.color[ch];
                }
                if clamped {
                    continue;
                }
                let (power, dx, dy) = splat_power(s, px, py);
                let e = power.exp();
                grad.opacity += dalpha * e;
                let dpower = dalpha * alpha;
                let [a, b, c] = s.conic;
                grad.mean2d[0] += dpower * (a * dx + b * dy);
                grad.mean2d[1] += dpower * (b * dx + c * dy);
                grad.conic[0] += dpower * T::lit(-0.5) * dx * dx;
                grad.conic[1] += -dpower * dx * dy;
                grad.conic[2] += dpower * T::lit(-0.5) * dy * dy;
            }
        }

        let n = attrs.len();
        let mut d_mu = vec![zero; n * 3];
        let mut d_q = vec![zero; n * 4];
        let mut d_s = vec![zero; n * 3];
        let mut d_logit = vec![zero; n];
        let mut d_h = vec![zero; attrs.h.len()];
        for (s, grad) in tr.splats.iter().zip(&sg) {
            let i = s.index;
            let gg = backprop_splat(&attrs, i, &self.cam, grad);
            d_mu[3 * i..3 * i + 3].copy_from_slice(&gg.mu);
            d_q[4 * i..4 * i + 4].copy_from_slice(&gg.q);
            d_s[3 * i..3 * i + 3].copy_from_slice(&gg.log_scale);
            d_logit[i] = gg.logit;
            let bw = attrs.sh_count * 3;
            d_h[i * bw..(i + 1) * bw].copy_from_slice(&gg.sh[..bw]);
        }
        Ok(vec![
            Some(Array::new(inputs[0].shape().to_vec(), d_mu)?),
            Some(Array::new(inputs[1].shape().to_vec(), d_q)?),
            Some(Array::new(inputs[2].shape().to_vec(), d_s)?),
            Some(Array::new(inputs[3].shape().to_vec(), d_logit)?),
            Some(Array::new(inputs[4].shape().to_vec(), d_h)?),
        ])
    }
}

struct AttributeGrad<T> {
    mu: [T; 3],
    q: [T; 4],
    log_scale: [T; 3],
    logit: T,
    sh: [T; 27],
}

/// Chains screen-space gradients of one splat back to its 3D attributes.
fn backprop_splat<T: Scalar>(
    attrs: &Attributes<T>,
    i: usize,
    cam: &Camera<T>,
    grad: &SplatGrad<T>,
) -> AttributeGrad<T> {
    let zero = T::zero();
    let two = T::lit(2.0);
    let mu = attrs.mu(i);
    let q_raw = attrs.q(i);
    let qn = normalize_quat(q_raw);
    let r = rotation_from_unit_quat(qn);
    let scale = attrs.s(i).map(|v| v.exp());
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= scale[j];
        }
    }
    let cov = build_covariance(q_raw, attrs.s(i));
    let wr = cam.rotation();
    let p = cam.to_camera(mu);
    let (fx, fy) = (cam.fx, cam.fy);
    let jac = perspective_jacobian(p, fx, fy);
    let mut a = [[zero; 3]; 2];
    for rr in 0..2 {
        for c in 0..3 {
            a[rr][c] = jac[rr][0] * wr[0][c] + jac[rr][1] * wr[1][c] + jac[rr][2] * wr[2][c];
        }
    }
    let proj = project(mu, &cov, cam).expect("splat passed preprocessing");
    let qm = inverse2(&proj.cov2d).expect("splat passed preprocessing");

    let mut d_mu = [zero; 3];

    // opacity
    let sig = sigmoid(attrs.logit[i]);
    let d_logit = grad.opacity * sig * (T::one() - sig);

    // color
    let (v, dist) = view_direction(mu, cam.center());
    let coeffs = attrs.sh(i);
    let count = attrs.sh_count;
    let y = basis(count, v);
    let raw = crate::gaussians::sh_color_raw(&sh_rows(coeffs), v);
    let mut dc = grad.color;
    for ch in 0..3 {
        if !(raw[ch] > zero && raw[ch] < T::one()) {
            dc[ch] = zero;
        }
    }
    let mut d_sh = [zero; 27];
    let yj = basis_jacobian(count, v);
    let mut dv = [zero; 3];
    for b in 0..count {
        let mut hb_dc = zero;
        for ch in 0..3 {
            d_sh[3 * b + ch] = y[b] * dc[ch];
            hb_dc += coeffs[3 * b + ch] * dc[ch];
        }
        for k in 0..3 {
            dv[k] += yj[b][k] * hb_dc;
        }
    }
    let v_dot = v[0] * dv[0] + v[1] * dv[1] + v[2] * dv[2];
    for k in 0..3 {
        d_mu[k] += (dv[k] - v[k] * v_dot) / dist;
    }

    // conic -> 2D covariance: dΣ2d = −Q·GQ·Q
    let gq = [
        [grad.conic[0], grad.conic[1] * T::lit(0.5)],
        [grad.conic[1] * T::lit(0.5), grad.conic[2]],
    ];
    let mut tmp = [[zero; 2]; 2];
    for rr in 0..2 {
        for c in 0..2 {
            tmp[rr][c] = qm[rr][0] * gq[0][c] + qm[rr][1] * gq[1][c];
        }
    }
    let mut gs = [[zero; 2]; 2];
    for rr in 0..2 {
        for c in 0..2 {
            gs[rr][c] = -(tmp[rr][0] * qm[0][c] + tmp[rr][1] * qm[1][c]);
        }
    }

    // Σ2d = A Σ Aᵀ: dΣ = Aᵀ GS A, dA = 2 GS A Σ
    let mut gs_a = [[zero; 3]; 2];
    for rr in 0..2 {
        for c in 0..3 {
            gs_a[rr][c] = gs[rr][0] * a[0][c] + gs[rr][1] * a[1][c];
        }
    }
    let mut d_cov: Mat3<T> = [[zero; 3]; 3];
    for rr in 0..3 {
        for c in 0..3 {
            d_cov[rr][c] = a[0][rr] * gs_a[0][c] + a[1][rr] * gs_a[1][c];
        }
    }
    let mut d_a = [[zero; 3]; 2];
    for rr in 0..2 {
        for c in 0..3 {
            d_a[rr][c] = two
                * (gs_a[rr][0] * cov[0][c] + gs_a[rr][1] * cov[1][c] + gs_a[rr][2] * cov[2][c]);
        }
    }
    // A = J·W: dJ = dA·Wᵀ
    let mut d_j = [[zero; 3]; 2];
    for rr in 0..2 {
        for c in 0..3 {
            d_j[rr][c] = d_a[rr][0] * wr[c][0] + d_a[rr][1] * wr[c][1] + d_a[rr][2] * wr[c][2];
        }
    }
    let (x, yy, z) = (p[0], p[1], p[2]);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dp = [zero; 3];
    dp[0] += d_j[0][2] * (-fx / z2);
    dp[1] += d_j[1][2] * (-fy / z2);
    dp[2] += d_j[0][0] * (-fx / z2)
        + d_j[0][2] * (two * fx * x / z3)
        + d_j[1][1] * (-fy / z2)
        + d_j[1][2] * (two * fy * yy / z3);
    // mean2d = (fx x/z + cx, fy y/z + cy)
    dp[0] += grad.mean2d[0] * fx / z;
    dp[1] += grad.mean2d[1] * fy / z;
    dp[2] -= grad.mean2d[0] * fx * x / z2 + grad.mean2d[1] * fy * yy / z2;
    for k in 0..3 {
        d_mu[k] += wr[0][k] * dp[0] + wr[1][k] * dp[1] + wr[2][k] * dp[2];
    }

    // Σ = M Mᵀ, M = R·diag(scale)
    let mut d_m = [[zero; 3]; 3];
    for rr in 0..3 {
        for c in 0..3 {
            d_m[rr][c] = two * (d_cov[rr][0] * m[0][c] + d_cov[rr][1] * m[1][c] + d_cov[rr][2] * m[2][c]);
        }
    }
    let mut d_log_scale = [zero; 3];
    let mut d_r = [[zero; 3]; 3];
    for j in 0..3 {
        let mut ds = zero;
        for rr in 0..3 {
            ds += d_m[rr][j] * r[rr][j];
            d_r[rr][j] = d_m[rr][j] * scale[j];
        }
        d_log_scale[j] = ds * scale[j];
    }
    let [qw, qx, qy, qz] = qn;
    let gr = d_r;
    let dqn = [
        two * (-qz * gr[0][1] + qy * gr[0][2] + qz * gr[1][0] - qx * gr[1][2] - qy * gr[2][0]
            + qx * gr[2][1]),
        two * (qy * gr[0][1] + qz * gr[0][2] + qy * gr[1][0] - two * qx * gr[1][1]
            - qw * gr[1][2]
            + qz * gr[2][0]
            + qw * gr[2][1]
            - two * qx * gr[2][2]),
        two * (-two * qy * gr[0][0] + qx * gr[0][1] + qw * gr[0][2] + qx * gr[1][0]
            + qz * gr[1][2]
            - qw * gr[2][0]
            + qz * gr[2][1]
            - two * qy * gr[2][2]),
        two * (-two * qz * gr[0][0] - qw * gr[0][1] + qx * gr[0][2] + qw * gr[1][0]
            - two * qz * gr[1][1]
            + qy * gr[1][2]
            + qx * gr[2][0]
            + qy * gr[2][1]),
    ];
    let qnorm = (q_raw[0] * q_raw[0] + q_raw[1] * q_raw[1] + q_raw[2] * q_raw[2] + q_raw[3] * q_raw[3]).sqrt();
    let mut d_q = [zero; 4];
    if qnorm > zero {
        let dot = qn[0] * dqn[0] + qn[1] * dqn[1] + qn[2] * dqn[2] + qn[3] * dqn[3];
        for k in 0..4 {
            d_q[k] = (dqn[k] - qn[k] * dot) / qnorm;
        }
    }
    AttributeGrad {
        mu: d_mu,
        q: d_q,
        log_scale: d_log_scale,
        logit: d_logit,
        sh: d_sh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_report;
    use crate::diffcore::ProbePlan;

    fn single(mu: [f64; 3], logit: f64, h0: f64) -> GaussianCloud<f64> {
        let mut c = GaussianCloud::empty(0, 0);
        c.mu = Array::new(vec![1, 3], mu.to_vec()).unwrap();
        c.q = Array::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        c.s = Array::full(vec![1, 3], (0.05f64).ln());
        c.sigma_logit = Array::full(vec![1, 1], logit);
        c.h = Array::full(vec![1, 1, 3], h0);
        c.embed = Array::zeros(vec![1, 0]);
        c
    }

    fn cam8() -> Camera<f64> {
        Camera::identity(8.0, 8.0, 3.0, 4.0, 8, 8)
    }

    #[test]
    fn empty_cloud_renders_background() {
        let c = GaussianCloud::<f64>::empty(1, 4);
        let img = render(&c, &cam8(), [0.0; 3]).unwrap();
        assert!(img.rgb.data().iter().all(|&v| v == 0.0));
        assert!(img.alpha.data().iter().all(|&v| v == 0.0));
        let img = render(&c, &cam8(), [0.2, 0.4, 0.6]).unwrap();
        assert_eq!(&img.rgb.data()[..3], &[0.2, 0.4, 0.6]);
    }

    #[test]
    fn saturated_gray_splat_at_its_center_pixel() {
        // on-axis point lands on pixel (cx, cy) = (3, 4)
        let c = single([0.0, 0.0, 2.0], 40.0, 0.0);
        let bg = [0.2, 0.6, 1.0];
        let img = render(&c, &cam8(), bg).unwrap();
        let p = (4 * 8 + 3) * 3;
        for ch in 0..3 {
            let expect = 0.99 * 0.5 + 0.01 * bg[ch];
            assert!((img.rgb.data()[p + ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn render_gradient_wrt_position_matches_fd() {
        let mut c = single([0.05, -0.03, 2.0], 0.3, 0.2);
        c.s = Array::full(vec![1, 3], (0.3f64).ln());
        let cam = cam8();
        let target = Array::from_fn(vec![8, 8, 3], |i| ((i * 37 % 17) as f64) / 17.0);
        let params = vec![c.mu.clone(), c.q.clone(), c.s.clone(), c.sigma_logit.clone(), c.h.clone()];
        let report = finite_difference_report(
            |t, p| {
                let cv = CloudVars {
                    mu: p[0],
                    q: p[1],
                    s: p[2],
                    sigma_logit: p[3],
                    h: p[4],
                    embed: None,
                };
                let (img, _) = render_on_tape(t, &cv, &cam, [0.1, 0.1, 0.1])?;
                let tg = t.constant(target.clone())?;
                let d = t.sub(img, tg)?;
                let d = t.square(d)?;
                t.sum_all(d)
            },
            &params,
            1e-6,
            ProbePlan::default(),
        )
        .unwrap();
        for e in report {
            assert!(e < 1e-3, "{e}");
        }
    }

    #[test]
    fn offscreen_gaussian_gets_zero_gradient() {
        let mut c = single([0.0, 0.0, 2.0], 0.0, 0.1);
        c.mu = Array::new(vec![2, 3], vec![0.0, 0.0, 2.0, 50.0, 0.0, 2.0]).unwrap();
        c.q = Array::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.7, 0.1, 0.0, 0.0]).unwrap();
        c.s = Array::full(vec![2, 3], -2.0);
        c.sigma_logit = Array::zeros(vec![2, 1]);
        c.h = Array::full(vec![2, 1, 3], 0.1);
        let mut t = Tape::new();
        let cv = CloudVars::bind(&mut t, &c).unwrap();
        let (img, _) = render_on_tape(&mut t, &cv, &cam8(), [0.0; 3]).unwrap();
        let l = t.sum_all(img).unwrap();
        t.backward(l).unwrap();
        for v in [cv.mu, cv.q, cv.s, cv.sigma_logit, cv.h] {
            let g = t.grad(v).unwrap();
            let row = g.row(1);
            assert!(row.iter().all(|&x| x == 0.0), "{row:?}");
            assert!(g.row(0).iter().any(|&x| x != 0.0) || v == cv.q);
        }
    }
}
