//! Covariance construction, pinhole projection and point-wise opacity.

use super::Camera;
use crate::error::{Error, Result};
use crate::linalg::{inverse3, mat3_mul, mat3_vec, sub3, transpose3, Mat2, Mat3, Vec3};
use crate::scalar::Scalar;

/// Dilation added to every projected covariance, in px².
pub const COV2D_FLOOR: f64 = 0.3;
/// Points at or in front of this camera-space depth are rejected.
pub const Z_NEAR: f64 = 0.01;

/// Unit quaternion `(w, x, y, z)` from unnormalized storage.
pub fn normalize_quat<T: Scalar>(q: [T; 4]) -> [T; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == T::zero() {
        return [T::one(), T::zero(), T::zero(), T::zero()];
    }
    q.map(|c| c / n)
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_from_unit_quat<T: Scalar>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance<T: Scalar>(q: [T; 4], log_scale: Vec3<T>) -> Mat3<T> {
    let r = rotation_from_unit_quat(normalize_quat(q));
    let s = log_scale.map(|v| v.exp());
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    let mut cov = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    cov
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub mean2d: [T; 2],
    pub cov2d: Mat2<T>,
    pub depth: T,
}

/// Perspective Jacobian of `(fx·x/z + cx, fy·y/z + cy)` at camera point `p`.
pub fn perspective_jacobian<T: Scalar>(p: Vec3<T>, fx: T, fy: T) -> [[T; 3]; 2] {
    let z = p[2];
    let z2 = z * z;
    [
        [fx / z, T::zero(), -fx * p[0] / z2],
        [T::zero(), fy / z, -fy * p[1] / z2],
    ]
}

/// Projects a 3D gaussian to image space: `Σ2d = J W Σ Wᵀ Jᵀ + floor·I`.
pub fn project<T: Scalar>(mu: Vec3<T>, cov: &Mat3<T>, cam: &Camera<T>) -> Result<Projection<T>> {
    let p = cam.to_camera(mu);
    if p[2] <= T::lit(Z_NEAR) {
        return Err(Error::BehindCamera {
            z: p[2].to_f64_lossy(),
        });
    }
    let j = perspective_jacobian(p, cam.fx, cam.fy);
    let w = cam.rotation();
    // A = J·W (2×3)
    let mut a = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            a[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    // A·Σ (2×3)
    let mut a_cov = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            a_cov[r][c] = a[r][0] * cov[0][c] + a[r][1] * cov[1][c] + a[r][2] * cov[2][c];
        }
    }
    let floor = T::lit(COV2D_FLOOR);
    let mut cov2d = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov2d[r][c] = a_cov[r][0] * a[c][0] + a_cov[r][1] * a[c][1] + a_cov[r][2] * a[c][2];
        }
    }
    cov2d[0][0] += floor;
    cov2d[1][1] += floor;
    let sym = (cov2d[0][1] + cov2d[1][0]) * T::lit(0.5);
    cov2d[0][1] = sym;
    cov2d[1][0] = sym;
    Ok(Projection {
        mean2d: [
            cam.fx * p[0] / p[2] + cam.cx,
            cam.fy * p[1] / p[2] + cam.cy,
        ],
        cov2d,
        depth: p[2],
    })
}

/// `σ·exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn opacity_at<T: Scalar>(x: Vec3<T>, mu: Vec3<T>, cov: &Mat3<T>, sigma: T) -> T {
    let inv = inverse3(cov).unwrap_or_else(|| {
        let eps = T::lit(1e-8);
        let mut reg = *cov;
        for (i, row) in reg.iter_mut().enumerate() {
            row[i] += eps;
        }
        inverse3(&reg).unwrap_or([[T::zero(); 3]; 3])
    });
    let d = sub3(x, mu);
    let m = mat3_vec(&inv, d);
    let q = d[0] * m[0] + d[1] * m[1] + d[2] * m[2];
    sigma * (T::lit(-0.5) * q).exp()
}

/// `R·Rᵀ` deviation from identity, for camera validation.
pub(crate) fn orthonormality_error<T: Scalar>(r: &Mat3<T>) -> T {
    let rrt = mat3_mul(r, &transpose3(r));
    let mut worst = T::zero();
    for (i, row) in rrt.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quat_unit_scale_gives_identity() {
        let c = build_covariance([1.0f64, 0.0, 0.0, 0.0], [0.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(c[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn scale_is_squared() {
        let c = build_covariance([1.0f64, 0.0, 0.0, 0.0], [2.0f64.ln(), 0.0, 0.0]);
        assert!((c[0][0] - 4.0).abs() < 1e-12);
        assert_eq!(c[1][1], 1.0);
        assert_eq!(c[2][2], 1.0);
        assert_eq!(c[0][1], 0.0);
    }

    #[test]
    fn quaternion_scale_invariance() {
        let q = [0.3f64, -0.4, 0.8, 0.2];
        let s = [0.1, -0.5, 0.3];
        let a = build_covariance(q, s);
        let b = build_covariance(q.map(|v| v * -3.7), s);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let cam = Camera::<f64>::identity(1.0, 1.0, 3.5, 2.5, 8, 6);
        let p = project([0.0, 0.0, 1.0], &build_covariance([1.0, 0.0, 0.0, 0.0], [0.0; 3]), &cam)
            .unwrap();
        assert_eq!(p.mean2d, [3.5, 2.5]);
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn isotropic_cov2d_closed_form() {
        let f = 10.0;
        let cam = Camera::<f64>::identity(f, f, 0.0, 0.0, 8, 8);
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let p = project([0.0, 0.0, 2.0], &eye, &cam).unwrap();
        let expect = (f / 2.0) * (f / 2.0) + COV2D_FLOOR;
        assert!((p.cov2d[0][0] - expect).abs() < 1e-12);
        assert!((p.cov2d[1][1] - expect).abs() < 1e-12);
        assert_eq!(p.cov2d[0][1], 0.0);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = Camera::<f64>::identity(1.0, 1.0, 0.0, 0.0, 4, 4);
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            project([0.0, 0.0, Z_NEAR], &eye, &cam),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project([0.0, 0.0, -1.0], &eye, &cam).is_err());
    }

    #[test]
    fn opacity_at_center_and_unit_mahalanobis() {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mu = [0.2, -0.1, 0.7];
        assert_eq!(opacity_at(mu, mu, &eye, 0.83), 0.83);
        let x = [mu[0] + 1.0, mu[1] + 1.0, mu[2]];
        let a = opacity_at(x, mu, &eye, 0.5);
        assert!((a - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let c = build_covariance([1.0f64, 0.0, 0.0, 0.0], [0.0, 0.0, f64::NEG_INFINITY]);
        let a = opacity_at([0.0, 0.0, 0.0], [0.0; 3], &c, 0.7);
        assert_eq!(a, 0.7);
    }
}
