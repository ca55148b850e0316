//! Gaussian-splat scene representation and pinhole cameras.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::sh::ShCoeffs;

/// Region membership of a particle after mask consolidation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Label {
    #[default]
    Unmasked,
    Masked,
}

impl Label {
    /// Value composited into the semantic channel.
    pub fn value(self) -> f64 {
        match self {
            Label::Masked => 1.0,
            Label::Unmasked => 0.0,
        }
    }

    pub fn is_masked(self) -> bool {
        self == Label::Masked
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParticle {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// `(w, x, y, z)`
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
    pub label: Label,
}

impl GaussianParticle {
    /// Isotropic particle with DC-only color.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; 16];
        sh[0] = crate::sh::rgb_to_dc(rgb);
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            sh,
            label: Label::Unmasked,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        quat_scale_to_cov(self.rotation, self.log_scale)
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(self.rotation);
        if n > 0.0 {
            self.rotation = self.rotation.map(|v| v / n);
        }
    }

    /// Scalar parameter `k` in the flat order of
    /// [`crate::grad::ParticleGrad::to_flat`].
    pub fn param_mut(&mut self, k: usize) -> &mut f64 {
        match k {
            0..=2 => &mut self.position[k],
            3..=5 => &mut self.log_scale[k - 3],
            6..=9 => &mut self.rotation[k - 6],
            10 => &mut self.opacity_logit,
            11..=58 => &mut self.sh[(k - 11) / 3][(k - 11) % 3],
            _ => panic!("parameter index {k} out of range"),
        }
    }

    pub fn param(&self, k: usize) -> f64 {
        let mut copy = self.clone();
        *copy.param_mut(k)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub particles: Vec<GaussianParticle>,
    pub background: [f64; 3],
}

impl GaussianScene {
    pub fn new(particles: Vec<GaussianParticle>) -> Self {
        Self {
            particles,
            background: [0.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.particles.iter().map(|p| p.label).collect()
    }

    pub fn set_labels(&mut self, labels: &[Label]) -> Result<()> {
        if labels.len() != self.particles.len() {
            return Err(Error::shape(self.particles.len(), labels.len()));
        }
        for (p, &l) in self.particles.iter_mut().zip(labels) {
            p.label = l;
        }
        Ok(())
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.indices_with(Label::Masked)
    }

    pub fn unmasked_indices(&self) -> Vec<usize> {
        self.indices_with(Label::Unmasked)
    }

    fn indices_with(&self, label: Label) -> Vec<usize> {
        self.particles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of the (normalized) quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("quaternion {q:?} has no valid norm")));
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `R · diag(exp(2·log_scale)) · Rᵀ`, symmetrized so the result is exactly
/// symmetric.
pub fn quat_scale_to_cov(rotation: [f64; 4], log_scale: Vector3<f64>) -> Result<Matrix3<f64>> {
    let r = quat_to_rotmat(rotation)?;
    let m = r * Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let cov = m * m.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Pinhole camera: intrinsics in pixels plus a rigid world-to-camera pose.
/// Camera space is x right, y down, z forward; pixel centers sit at integer
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

/// Orthonormality tolerance of a camera's rotation block.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        };
        cam.validate(ROTATION_TOLERANCE)?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, `up` roughly opposite to image y.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(
            width,
            height,
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            m,
        )
    }

    pub fn validate(&self, tolerance: f64) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera has zero extent".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= tolerance) || !(r.determinant() > 0.0) {
            return Err(Error::InvalidInput(format!(
                "world_to_camera rotation is not orthonormal (error {err:.3e})"
            )));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidInput("world_to_camera last row must be 0 0 0 1".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera-space ray through pixel `(u, v)`, scaled so that z = 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// World point at camera-space depth `depth` along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = self.pixel_ray(u, v) * depth;
        self.rotation().transpose() * (pc - self.translation())
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().transpose() * Vector3::z()
    }
}

/// Training view: camera, observed image and the 2D inpainting mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
}

impl CameraView {
    pub fn new(camera: Camera, image: Image, mask: Mask) -> Result<Self> {
        if image.width != camera.width || image.height != camera.height || image.channels != 3 {
            return Err(Error::shape(
                format!("{}x{}x3", camera.width, camera.height),
                format!("{}x{}x{}", image.width, image.height, image.channels),
            ));
        }
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::shape(
                format!("{}x{} mask", image.width, image.height),
                format!("{}x{}", mask.width, mask.height),
            ));
        }
        Ok(Self {
            camera,
            image,
            mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_rotation_unit_scale_is_identity() {
        let cov = quat_scale_to_cov([1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap();
        assert_eq!(cov, Matrix3::identity());
    }

    #[test]
    fn axis_aligned_scaling() {
        let cov = quat_scale_to_cov([1.0, 0.0, 0.0, 0.0], Vector3::new(2f64.ln(), 0.0, 0.0)).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((cov - expect).abs().max() < 1e-14);
    }

    #[test]
    fn rotated_scaling_matches_matrix_product_oracle() {
        let half = std::f64::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let cov = quat_scale_to_cov(q, Vector3::new(2f64.ln(), 0.0, 0.0)).unwrap();
        // Oracle: explicit 90° z rotation, R S Sᵀ Rᵀ.
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let oracle = r * s * s.transpose() * r.transpose();
        assert!((cov - oracle).abs().max() < 1e-12);
        assert!((cov - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(matches!(
            quat_scale_to_cov([0.0; 4], Vector3::zeros()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            32,
            24,
            30.0,
            Vector3::new(1.0, 2.0, -3.0),
            Vector3::new(0.5, 0.0, 1.0),
            Vector3::y(),
        )
        .unwrap();
        let pc = cam.to_camera(&Vector3::new(0.5, 0.0, 1.0));
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        assert!((cam.center() - Vector3::new(1.0, 2.0, -3.0)).norm() < 1e-12);
    }

    #[test]
    fn non_orthonormal_pose_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.01;
        assert!(Camera::new(4, 4, 1.0, 1.0, 2.0, 2.0, m).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_and_positive_definite(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-3.0f64..1.0),
        ) {
            prop_assume!(quat_norm(q) > 1e-3);
            let log_scale = Vector3::from(s);
            let cov = quat_scale_to_cov(q, log_scale).unwrap();
            prop_assert_eq!(cov, cov.transpose());
            prop_assert!(cov.cholesky().is_some());
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }
    }
}
