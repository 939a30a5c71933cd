//! Rotation algebra, pinhole projection and the linear-blend-skinning kernel.
//!
//! Quaternions are `(w, x, y, z)` with the Hamilton product. Axis-angle
//! vectors encode the angle as their length. Every function here is pure.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::Real;

pub type Vec2 = Vector2<Real>;
pub type Vec3 = Vector3<Real>;
pub type Mat3 = Matrix3<Real>;
pub type Mat4 = Matrix4<Real>;
pub type Mat2x3 = Matrix2x3<Real>;

/// Below this angle the axis-angle maps switch to their first-order series.
const SMALL_ANGLE: Real = 1e-8;

/// Largest orthogonality defect accepted by [`matrix_to_rodrigues`].
pub const ROTATION_TOLERANCE: Real = 1e-5;

/// Camera-space depth below which a point counts as behind the camera.
pub const MIN_DEPTH: Real = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthogonality defect {0:e})")]
    NotRotation(Real),
    #[error("{bones} bone transforms but {weights} skinning weights")]
    LengthMismatch { bones: usize, weights: usize },
    #[error("skinning weights sum to {0}, expected 1")]
    WeightSum(Real),
    #[error("negative skinning weight {0}")]
    NegativeWeight(Real),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axial vector of the skew-symmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rotation by `|theta|` radians about `theta / |theta|`.
pub fn rodrigues_to_matrix(theta: &Vec3) -> Mat3 {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Mat3::identity() + k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives `dR/dtheta_i` of [`rodrigues_to_matrix`].
pub fn rodrigues_derivatives(theta: &Vec3) -> [Mat3; 3] {
    let angle2 = theta.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if angle2.sqrt() < SMALL_ANGLE {
        return basis.map(|e| skew(&e));
    }
    let r = rodrigues_to_matrix(theta);
    let k = skew(theta);
    let i_minus_r = Mat3::identity() - r;
    basis.map(|e| {
        let i = e.iamax();
        let lever = theta.cross(&(i_minus_r * e));
        (k * theta[i] + skew(&lever)) * r / angle2
    })
}

/// Largest deviation of `r` from a proper rotation.
pub fn orthogonality_defect(r: &Mat3) -> Real {
    let gram = r.transpose() * r - Mat3::identity();
    gram.amax().max((r.determinant() - 1.0).abs())
}

/// Inverse of [`rodrigues_to_matrix`]; the result has length in `[0, pi]`.
pub fn matrix_to_rodrigues(r: &Mat3) -> Result<Vec3, GeometryError> {
    let defect = orthogonality_defect(r);
    if !(defect <= ROTATION_TOLERANCE) {
        return Err(GeometryError::NotRotation(defect));
    }
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axial = vee(r);
    // atan2 keeps full precision near 0 and pi, where acos does not
    let angle = axial.norm().atan2(cos);
    if angle < 1e-6 {
        // sin(a)/a ~ 1 - a^2/6
        return Ok(axial * (1.0 + angle * angle / 6.0));
    }
    if angle < 3.0 {
        return Ok(axial * (angle / angle.sin()));
    }
    // Near pi the axial vector vanishes; read the axis off the symmetric part.
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let d = outer.diagonal();
    let col = d.imax();
    let mut axis: Vec3 = outer.column(col).into();
    axis /= axis.norm();
    if axis.dot(&axial) < 0.0 {
        axis = -axis;
    }
    Ok(axis * angle)
}

/// Unit-norm or raw quaternion in `(w, x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: Real,
    pub x: Real,
    pub y: Real,
    pub z: Real,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: Real, x: Real, y: Real, z: Real) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [Real; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [Real; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(theta: &Vec3) -> Self {
        let angle = theta.norm();
        if angle < SMALL_ANGLE {
            return Quat::new(1.0, 0.5 * theta.x, 0.5 * theta.y, 0.5 * theta.z).normalized();
        }
        let s = (0.5 * angle).sin() / angle;
        Quat::new((0.5 * angle).cos(), s * theta.x, s * theta.y, s * theta.z)
    }

    pub fn conjugate(self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm_squared(self) -> Real {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(self) -> Real {
        self.norm_squared().sqrt()
    }

    pub fn dot(self, o: Quat) -> Real {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn scale(self, s: Real) -> Self {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Quat) -> Self {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn normalized(self) -> Self {
        self.scale(1.0 / self.norm())
    }

    /// Rotation matrix of the unit quaternion (the input is assumed normalized).
    pub fn to_matrix(self) -> Mat3 {
        let Quat { w, x, y, z } = self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Pulls `dL/dR` back through [`Quat::to_matrix`].
    pub fn to_matrix_backward(self, grad: &Mat3) -> Quat {
        let Quat { w, x, y, z } = self;
        let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
        let dx = Mat3::new(
            0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x,
        );
        let dy = Mat3::new(
            -4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y,
        );
        let dz = Mat3::new(
            -4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0,
        );
        Quat::new(grad.dot(&dw), grad.dot(&dx), grad.dot(&dy), grad.dot(&dz))
    }

    /// Pulls a gradient back through `q / |q|`.
    pub fn normalize_backward(self, grad: Quat) -> Quat {
        let n = self.norm();
        let u = self.scale(1.0 / n);
        grad.add(u.scale(-u.dot(grad))).scale(1.0 / n)
    }
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Gradients of `quat_mul(a, b)` with respect to `a` and `b`.
pub fn quat_mul_backward(a: Quat, b: Quat, grad: Quat) -> (Quat, Quat) {
    (quat_mul(grad, b.conjugate()), quat_mul(a.conjugate(), grad))
}

/// Rigid bone transform `x -> R x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for BoneTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl BoneTransform {
    pub const IDENTITY: BoneTransform = BoneTransform {
        rotation: Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &BoneTransform) -> BoneTransform {
        BoneTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> BoneTransform {
        let rt = self.rotation.transpose();
        BoneTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub(crate) fn check_weights(bones: usize, weights: &[Real]) -> Result<(), GeometryError> {
    if bones != weights.len() {
        return Err(GeometryError::LengthMismatch { bones, weights: weights.len() });
    }
    if let Some(&w) = weights.iter().find(|w| **w < 0.0) {
        return Err(GeometryError::NegativeWeight(w));
    }
    let sum: Real = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GeometryError::WeightSum(sum));
    }
    Ok(())
}

/// Linear blend skinning of one point: `sum_k w_k B_k x`.
pub fn lbs_point(x: &Vec3, bones: &[BoneTransform], weights: &[Real]) -> Result<Vec3, GeometryError> {
    check_weights(bones.len(), weights)?;
    Ok(lbs_point_unchecked(x, bones, weights))
}

pub(crate) fn lbs_point_unchecked(x: &Vec3, bones: &[BoneTransform], weights: &[Real]) -> Vec3 {
    let mut out = Vec3::zeros();
    for (b, &w) in bones.iter().zip(weights) {
        if w != 0.0 {
            out += b.apply(x) * w;
        }
    }
    out
}

/// Orthogonal polar factor of a 3x3 matrix with its right singular data,
/// retained for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct PolarFactor {
    pub rotation: Mat3,
    right: Mat3,
    singular: Vec3,
}

/// Closest rotation to `a` (`U V^T` from the SVD). Returns `None` when `a` is
/// near-singular or orientation-reversing.
pub fn polar_rotation(a: &Mat3) -> Option<PolarFactor> {
    if !(a.determinant() > 1e-9) {
        return None;
    }
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let singular = svd.singular_values;
    if singular.min() < 1e-6 {
        return None;
    }
    Some(PolarFactor { rotation: u * vt, right: vt.transpose(), singular })
}

impl PolarFactor {
    /// Pulls `dL/dU` back to `dL/dA` for `U = polar(A)`.
    pub fn backward(&self, grad: &Mat3) -> Mat3 {
        let v = &self.right;
        let mut x = v.transpose() * (self.rotation.transpose() * grad) * v;
        for i in 0..3 {
            for j in 0..3 {
                x[(i, j)] /= self.singular[i] + self.singular[j];
            }
        }
        let x = v * x * v.transpose();
        self.rotation * (x - x.transpose())
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point. `in_front` is false for points that
/// must be culled; `uv` is meaningless then.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vec2,
    pub depth: Real,
    pub in_front: bool,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        fx: Real,
        fy: Real,
        cx: Real,
        cy: Real,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { rotation, translation, fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with image-space `v` pointing
    /// along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: &Vec3,
        target: &Vec3,
        up: &Vec3,
        fx: Real,
        fy: Real,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            rotation,
            translation,
            fx,
            fy,
            width as Real * 0.5,
            height as Real * 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            )));
        }
        let (w, h) = (self.width as Real, self.height as Real);
        if !(self.cx >= 0.0 && self.cx < w && self.cy >= 0.0 && self.cy < h) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if orthogonality_defect(&self.rotation) > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidCamera("rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, x_world: &Vec3) -> Vec3 {
        self.rotation * x_world + self.translation
    }

    /// World-space camera centre.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project_camera_point(&self, x_cam: &Vec3) -> Projection {
        let z = x_cam.z;
        if !(z > MIN_DEPTH) {
            return Projection { uv: Vec2::zeros(), depth: z, in_front: false };
        }
        let uv = Vec2::new(self.fx * x_cam.x / z + self.cx, self.fy * x_cam.y / z + self.cy);
        Projection { uv, depth: z, in_front: true }
    }

    pub fn project_point(&self, x_world: &Vec3) -> Projection {
        self.project_camera_point(&self.to_camera(x_world))
    }

    /// Jacobian of the pixel coordinates with respect to camera-space position.
    pub fn projection_jacobian(&self, x_cam: &Vec3) -> Mat2x3 {
        let iz = 1.0 / x_cam.z;
        let iz2 = iz * iz;
        Mat2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x_cam.y * iz2,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    rotation: [Real; 9],
    translation: [Real; 3],
    fx: Real,
    fy: Real,
    cx: Real,
    cy: Real,
    width: u32,
    height: u32,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = GeometryError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        Camera::new(
            Mat3::from_row_slice(&r.rotation),
            Vec3::from(r.translation),
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            r.width,
            r.height,
        )
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = c.rotation[(i, j)];
            }
        }
        CameraRecord {
            rotation,
            translation: c.translation.into(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}
