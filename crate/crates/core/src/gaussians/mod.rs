//! Canonical gaussian set, cameras and the per-primitive geometry.

mod geometry;
pub mod sh;

pub use geometry::{
    build_covariance, normalize_quat, opacity_at, perspective_jacobian, project,
    rotation_from_unit_quat, Projection, COV2D_FLOOR, Z_NEAR,
};
pub use sh::{sh_color, sh_color_raw};

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{cross3, mat3_tvec, mat3_vec, normalize3, Mat3, Vec3};
use crate::scalar::Scalar;

/// Structure-of-arrays gaussian set.
///
/// * `mu`: N×3 positions
/// * `q`: N×4 rotations `(w, x, y, z)`, normalized at use
/// * `s`: N×3 log-scales
/// * `sigma_logit`: N×1 opacity logits
/// * `h`: N×B×3 SH coefficients, `B = (deg+1)²`
/// * `embed`: N×D learnable per-gaussian embedding (D may be 0)
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T> {
    pub mu: Array<T>,
    pub q: Array<T>,
    pub s: Array<T>,
    pub sigma_logit: Array<T>,
    pub h: Array<T>,
    pub embed: Array<T>,
}

impl<T: Scalar> GaussianCloud<T> {
    /// An empty cloud with the given SH degree and embedding width.
    pub fn empty(sh_degree: usize, embed_dim: usize) -> Self {
        let b = sh::basis_count(sh_degree);
        Self {
            mu: Array::zeros(vec![0, 3]),
            q: Array::zeros(vec![0, 4]),
            s: Array::zeros(vec![0, 3]),
            sigma_logit: Array::zeros(vec![0, 1]),
            h: Array::zeros(vec![0, b, 3]),
            embed: Array::zeros(vec![0, embed_dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sh_count(&self) -> usize {
        self.h.shape().get(1).copied().unwrap_or(1)
    }

    pub fn sh_degree(&self) -> usize {
        sh::degree_for_count(self.sh_count()).unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.shape().get(1).copied().unwrap_or(0)
    }

    /// Checks that all arrays share the leading dimension and have the
    /// documented trailing shapes.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let check = |a: &Array<T>, tail: &[usize], name: &'static str| -> Result<()> {
            let s = a.shape();
            if s.len() != tail.len() + 1 || s[0] != n || s[1..] != *tail {
                let mut want = vec![n];
                want.extend_from_slice(tail);
                return Err(Error::shape(name, s, &want));
            }
            Ok(())
        };
        check(&self.mu, &[3], "cloud.mu")?;
        check(&self.q, &[4], "cloud.q")?;
        check(&self.s, &[3], "cloud.s")?;
        check(&self.sigma_logit, &[1], "cloud.sigma_logit")?;
        let b = self.sh_count();
        if sh::degree_for_count(b).is_none() {
            return Err(Error::InvalidArgument(format!("{b} SH coefficients per channel")));
        }
        check(&self.h, &[b, 3], "cloud.h")?;
        check(&self.embed, &[self.embed_dim()], "cloud.embed")?;
        Ok(())
    }

    pub fn position(&self, i: usize) -> Vec3<T> {
        let r = self.mu.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn positions(&self) -> Vec<Vec3<T>> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn quat(&self, i: usize) -> [T; 4] {
        let r = self.q.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn log_scale(&self, i: usize) -> Vec3<T> {
        let r = self.s.row(i);
        [r[0], r[1], r[2]]
    }

    /// Opacity in `(0, 1)`.
    pub fn opacity(&self, i: usize) -> T {
        T::one() / (T::one() + (-self.sigma_logit.data()[i]).exp())
    }

    pub fn sh_coeffs(&self, i: usize) -> Vec<[T; 3]> {
        self.h.row(i).chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn covariance(&self, i: usize) -> Mat3<T> {
        build_covariance(self.quat(i), self.log_scale(i))
    }

    pub fn cast<U: Scalar>(&self) -> GaussianCloud<U> {
        GaussianCloud {
            mu: self.mu.cast(),
            q: self.q.cast(),
            s: self.s.cast(),
            sigma_logit: self.sigma_logit.cast(),
            h: self.h.cast(),
            embed: self.embed.cast(),
        }
    }
}

/// Tape handles of a cloud's attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CloudVars {
    pub mu: Var,
    pub q: Var,
    pub s: Var,
    pub sigma_logit: Var,
    pub h: Var,
    pub embed: Option<Var>,
}

impl CloudVars {
    /// Records every attribute as a trainable leaf.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, cloud: &GaussianCloud<T>) -> Result<Self> {
        Ok(Self {
            mu: tape.leaf(cloud.mu.clone())?,
            q: tape.leaf(cloud.q.clone())?,
            s: tape.leaf(cloud.s.clone())?,
            sigma_logit: tape.leaf(cloud.sigma_logit.clone())?,
            h: tape.leaf(cloud.h.clone())?,
            embed: if cloud.embed_dim() > 0 {
                Some(tape.leaf(cloud.embed.clone())?)
            } else {
                None
            },
        })
    }
}

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    /// Row-major world-to-camera transform.
    pub world_to_camera: [[T; 4]; 4],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world_to_camera: [[T; 4]; 4],
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if geometry::orthonormality_error(&cam.rotation()) > T::lit(1e-6) {
            return Err(Error::InvalidCamera("rotation block is not orthonormal".into()));
        }
        Ok(cam)
    }

    /// Camera at the origin looking down +z.
    pub fn identity(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Self {
        let mut w = [[T::zero(); 4]; 4];
        for (i, row) in w.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self::new(w, fx, fy, cx, cy, width, height).expect("identity pose is valid")
    }

    /// Camera at `eye` looking at `target`, principal point at the image
    /// center.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        focal: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize3(crate::linalg::sub3(target, eye));
        let right = normalize3(cross3(forward, up));
        let down = cross3(forward, right);
        let r = [right, down, forward];
        let t = mat3_vec(&r, eye).map(|v| -v);
        let mut w = [[T::zero(); 4]; 4];
        for i in 0..3 {
            w[i][..3].copy_from_slice(&r[i]);
            w[i][3] = t[i];
        }
        w[3][3] = T::one();
        let half = T::lit(0.5);
        Self::new(
            w,
            focal,
            focal,
            T::from_usize_lossy(width) * half,
            T::from_usize_lossy(height) * half,
            width,
            height,
        )
    }

    pub fn rotation(&self) -> Mat3<T> {
        let w = &self.world_to_camera;
        [
            [w[0][0], w[0][1], w[0][2]],
            [w[1][0], w[1][1], w[1][2]],
            [w[2][0], w[2][1], w[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        let w = &self.world_to_camera;
        [w[0][3], w[1][3], w[2][3]]
    }

    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let r = mat3_vec(&self.rotation(), p);
        let t = self.translation();
        [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        mat3_tvec(&self.rotation(), self.translation()).map(|v| -v)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Camera {
            world_to_camera: self.world_to_camera.map(|r| r.map(c)),
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::<f64>::look_at([3.0, 1.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 16, 16)
            .unwrap();
        let p = cam.to_camera([0.0; 3]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!(p[2] > 0.0);
        let c = cam.center();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[2] + 2.0).abs() < 1e-12);
        // world up projects above the image center
        let up = cam.to_camera([0.0, 1.0, 0.0]);
        assert!(up[1] < 0.0);
    }

    #[test]
    fn camera_validation() {
        let mut w = [[0.0f64; 4]; 4];
        w[0][0] = 2.0;
        w[1][1] = 1.0;
        w[2][2] = 1.0;
        assert!(Camera::new(w, 1.0, 1.0, 0.0, 0.0, 2, 2).is_err());
        w[0][0] = 1.0;
        assert!(Camera::new(w, 0.0, 1.0, 0.0, 0.0, 2, 2).is_err());
    }

    #[test]
    fn empty_cloud_validates() {
        let c = GaussianCloud::<f32>::empty(1, 16);
        c.validate().unwrap();
        assert_eq!(c.len(), 0);
        assert_eq!(c.sh_count(), 4);
    }
}
