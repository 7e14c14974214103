//! Real spherical harmonics up to degree 2, 3DGS sign convention.

use crate::scalar::Scalar;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub const MAX_SH_DEGREE: usize = 2;

/// Number of basis functions for `degree`.
pub fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose basis count is `count`, if any.
pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| basis_count(d) == count)
}

/// Basis values `Y_b(v)` for `b < count`; `v` must be unit length.
pub fn basis<T: Scalar>(count: usize, v: [T; 3]) -> [T; 9] {
    let [x, y, z] = v;
    let mut out = [T::zero(); 9];
    out[0] = T::lit(SH_C0);
    if count > 1 {
        let c1 = T::lit(SH_C1);
        out[1] = -c1 * y;
        out[2] = c1 * z;
        out[3] = -c1 * x;
    }
    if count > 4 {
        let c = SH_C2.map(T::lit);
        out[4] = c[0] * x * y;
        out[5] = c[1] * y * z;
        out[6] = c[2] * (T::lit(2.0) * z * z - x * x - y * y);
        out[7] = c[3] * x * z;
        out[8] = c[4] * (x * x - y * y);
    }
    out
}

/// Jacobian `dY_b/dv` rows for `b < count`.
pub fn basis_jacobian<T: Scalar>(count: usize, v: [T; 3]) -> [[T; 3]; 9] {
    let [x, y, z] = v;
    let zero = T::zero();
    let mut out = [[zero; 3]; 9];
    if count > 1 {
        let c1 = T::lit(SH_C1);
        out[1] = [zero, -c1, zero];
        out[2] = [zero, zero, c1];
        out[3] = [-c1, zero, zero];
    }
    if count > 4 {
        let c = SH_C2.map(T::lit);
        let two = T::lit(2.0);
        out[4] = [c[0] * y, c[0] * x, zero];
        out[5] = [zero, c[1] * z, c[1] * y];
        out[6] = [-two * c[2] * x, -two * c[2] * y, two * two * c[2] * z];
        out[7] = [c[3] * z, zero, c[3] * x];
        out[8] = [two * c[4] * x, -two * c[4] * y, zero];
    }
    out
}

/// Unclamped SH expansion plus the 0.5 offset.
pub fn sh_color_raw<T: Scalar>(h: &[[T; 3]], v: [T; 3]) -> [T; 3] {
    let y = basis(h.len(), v);
    let mut c = [T::lit(0.5); 3];
    for (b, coeff) in h.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += y[b] * coeff[ch];
        }
    }
    c
}

/// View-dependent color in `[0, 1]`.
pub fn sh_color<T: Scalar>(h: &[[T; 3]], v: [T; 3]) -> [T; 3] {
    sh_color_raw(h, v).map(|c| c.max(T::zero()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree0_is_view_independent() {
        let h = [[0.4f64, -0.2, 2.0]];
        let a = sh_color(&h, [0.0, 0.0, 1.0]);
        let b = sh_color(&h, [0.6, 0.8, 0.0]);
        assert_eq!(a, b);
        assert_eq!(a[0], (0.4 * SH_C0 + 0.5).clamp(0.0, 1.0));
        assert_eq!(a[2], 1.0);
    }

    #[test]
    fn degree1_along_z_uses_only_z_band() {
        let y = basis::<f64>(4, [0.0, 0.0, 1.0]);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[3], 0.0);
        assert_eq!(y[2], SH_C1);
    }

    #[test]
    fn degree1_averages_to_zero_over_the_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = [[0.0; 3], [0.3, -0.7, 0.2], [0.9, 0.1, -0.4], [-0.5, 0.6, 0.8]];
        let n = 20000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            // Marsaglia sampling of the unit sphere.
            let (u, w) = loop {
                let u: f64 = rng.random_range(-1.0..1.0);
                let w: f64 = rng.random_range(-1.0..1.0);
                if u * u + w * w < 1.0 {
                    break (u, w);
                }
            };
            let s = (1.0 - u * u - w * w).sqrt();
            let v = [2.0 * u * s, 2.0 * w * s, 1.0 - 2.0 * (u * u + w * w)];
            let c = sh_color_raw(&h, v);
            for ch in 0..3 {
                acc[ch] += c[ch] - 0.5;
            }
        }
        for a in acc {
            assert!((a / n as f64).abs() < 1e-2, "{a}");
        }
    }

    #[test]
    fn jacobian_matches_differences() {
        let v = [0.3f64, -0.5, 0.81];
        let j = basis_jacobian(9, v);
        let eps = 1e-6;
        for k in 0..3 {
            let mut p = v;
            let mut m = v;
            p[k] += eps;
            m[k] -= eps;
            let (bp, bm) = (basis(9, p), basis(9, m));
            for b in 0..9 {
                let fd = (bp[b] - bm[b]) / (2.0 * eps);
                assert!((fd - j[b][k]).abs() < 1e-8);
            }
        }
    }
}
