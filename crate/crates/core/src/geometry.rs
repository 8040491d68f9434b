//! Rigid-body geometry shared by every estimator in the crate.
//!
//! Three layers live here:
//!
//! * [`SE3Transform`] / [`Twist6`] with the exponential and logarithmic maps,
//! * [`Pose4`], the gravity-aligned `[x, y, z, yaw]` parameterization used as
//!   optimizer state (roll and pitch are supplied by the IMUs),
//! * [`error_4dof`], the relative error `log(T1⁻¹ T2)` reduced to its three
//!   translational components and its yaw component, together with analytic
//!   derivatives for yaw-only arguments ([`Pose4Jet`]).
//!
//! The tangent vector is ordered `(rho, phi)`, translation first.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{DMatrix, Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

/// Below this rotation angle the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-7;

/// The log map is rejected for angles closer than this to π.
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("log map singular: rotation angle {0} rad is within 1e-6 of pi")]
    LogSingularity(f64),
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let w = angle.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Elemental rotation about the vertical axis.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`rot_z`] with respect to the angle.
pub fn rot_z_derivative(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_rpy(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
        .to_rotation_matrix()
        .into_inner()
}

/// Inverse of [`rotation_from_rpy`]; returns `(roll, pitch, yaw)`.
pub fn rpy_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        let half = (0.5 * theta).sin() / theta;
        Matrix3::identity() + (theta.sin() / theta) * k + (2.0 * half * half) * k * k
    }
}

pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let w = vee(&(r - r.transpose()));
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * w.norm();
    let theta = sin.atan2(cos);
    if theta >= PI - LOG_SINGULARITY_MARGIN {
        return Err(GeometryError::LogSingularity(theta));
    }
    if theta < SMALL_ANGLE {
        Ok(0.5 * (1.0 + theta * theta / 6.0) * w)
    } else {
        Ok((theta / (2.0 * sin)) * w)
    }
}

/// Left Jacobian of SO(3), the `V` matrix coupling rotation and translation.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * k + (1.0 / 6.0) * k * k
    } else {
        let t2 = theta * theta;
        let half = (0.5 * theta).sin() / theta;
        Matrix3::identity() + (2.0 * half * half) * k + ((theta - theta.sin()) / (t2 * theta)) * k * k
    }
}

pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * k + (1.0 / 12.0) * k * k
    } else {
        let h = 0.5 * theta;
        let coeff = (1.0 - h * h.cos() / h.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * k + coeff * k * k
    }
}

/// Rigid transformation `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn from_rpy(translation: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(rotation_from_rpy(roll, pitch, yaw), translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &SE3Transform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// `(roll, pitch, yaw)` of the rotation in the ZYX convention.
    pub fn rpy(&self) -> (f64, f64, f64) {
        rpy_from_rotation(&self.rotation)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `‖RᵀR − I‖` plus a penalty when the determinant is not +1.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
            + (self.rotation.determinant() - 1.0).abs()
    }

    /// Translation interpolated linearly, rotation spherically; `s` in `[0, 1]`.
    pub fn interpolate(&self, other: &SE3Transform, s: f64) -> SE3Transform {
        let qa = UnitQuaternion::from_matrix(&self.rotation);
        let qb = UnitQuaternion::from_matrix(&other.rotation);
        let q = qa
            .try_slerp(&qb, s, 1e-12)
            .unwrap_or(if s < 0.5 { qa } else { qb });
        SE3Transform::new(
            q.to_rotation_matrix().into_inner(),
            self.translation.lerp(&other.translation, s),
        )
    }
}

impl Mul for SE3Transform {
    type Output = SE3Transform;
    fn mul(self, rhs: SE3Transform) -> SE3Transform {
        self.compose(&rhs)
    }
}

impl Mul<&SE3Transform> for &SE3Transform {
    type Output = SE3Transform;
    fn mul(self, rhs: &SE3Transform) -> SE3Transform {
        self.compose(rhs)
    }
}

/// Element of se(3): translational part `rho` and rotational part `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist6 {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist6 {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }
}

pub fn se3_exp(xi: &Twist6) -> SE3Transform {
    SE3Transform::new(so3_exp(&xi.phi), so3_left_jacobian(&xi.phi) * xi.rho)
}

pub fn se3_log(t: &SE3Transform) -> Result<Twist6, GeometryError> {
    let phi = so3_log(&t.rotation)?;
    Ok(Twist6::new(so3_left_jacobian_inverse(&phi) * t.translation, phi))
}

/// Gravity-aligned 4-DOF pose. `theta` is yaw, always held in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose4 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl Pose4 {
    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation_yaw(t: &Vector3<f64>, yaw: f64) -> Self {
        Self::new(t.x, t.y, t.z, yaw)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.theta)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.theta]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Translation and yaw of an arbitrary transform; roll and pitch are dropped.
    pub fn from_se3(t: &SE3Transform) -> Self {
        Self::from_translation_yaw(&t.translation, t.yaw())
    }

    pub fn to_se3(&self) -> SE3Transform {
        pose4_to_se3(self)
    }

    pub fn compose(&self, other: &Pose4) -> Pose4 {
        let t = self.translation() + rot_z(self.theta) * other.translation();
        Pose4::from_translation_yaw(&t, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose4 {
        let t = -(rot_z(-self.theta) * self.translation());
        Pose4::from_translation_yaw(&t, -self.theta)
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose4) -> Pose4 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        rot_z(self.theta) * p + self.translation()
    }
}

impl Mul for Pose4 {
    type Output = Pose4;
    fn mul(self, rhs: Pose4) -> Pose4 {
        self.compose(&rhs)
    }
}

pub fn pose4_to_se3(p: &Pose4) -> SE3Transform {
    SE3Transform::new(rot_z(p.theta), p.translation())
}

/// `[ξ(T1⁻¹T2).rho ; ξ(T1⁻¹T2).phi_z]`.
pub fn error_4dof(t1: &SE3Transform, t2: &SE3Transform) -> Result<Vector4<f64>, GeometryError> {
    let xi = se3_log(&(t1.inverse() * *t2))?;
    Ok(Vector4::new(xi.rho.x, xi.rho.y, xi.rho.z, xi.phi.z))
}

/// Inverse of the reduced log for yaw-only transforms: `exp((rho, 0, 0, yaw))`.
pub fn pose4_from_error(e: &Vector4<f64>) -> Pose4 {
    let t = se3_exp(&Twist6::new(
        Vector3::new(e[0], e[1], e[2]),
        Vector3::new(0.0, 0.0, e[3]),
    ));
    Pose4::from_se3(&t)
}

/// `(ψ/2)·cot(ψ/2)` and its derivative; diagonal of the planar `V⁻¹`.
fn half_cot(psi: f64) -> (f64, f64) {
    if psi.abs() < 1e-4 {
        let p2 = psi * psi;
        (1.0 - p2 / 12.0 - p2 * p2 / 720.0, -psi / 6.0 - p2 * psi / 180.0)
    } else {
        let h = 0.5 * psi;
        let cot = h.cos() / h.sin();
        let csc2 = 1.0 / (h.sin() * h.sin());
        (h * cot, 0.5 * cot - 0.25 * psi * csc2)
    }
}

/// Reduced log of a yaw-only transform. Agrees with [`error_4dof`] of
/// `(identity, pose4_to_se3(p))` and stays defined at ±π via the wrapped yaw.
pub fn log4(p: &Pose4) -> Vector4<f64> {
    let psi = p.theta;
    let (alpha, _) = half_cot(psi);
    let h = 0.5 * psi;
    Vector4::new(alpha * p.x + h * p.y, -h * p.x + alpha * p.y, p.z, psi)
}

/// `∂ log4(p) / ∂ (x, y, z, θ)`.
pub fn log4_jacobian(p: &Pose4) -> Matrix4<f64> {
    let psi = p.theta;
    let (alpha, dalpha) = half_cot(psi);
    let h = 0.5 * psi;
    Matrix4::new(
        alpha,
        h,
        0.0,
        dalpha * p.x + 0.5 * p.y,
        -h,
        alpha,
        0.0,
        -0.5 * p.x + dalpha * p.y,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Error between two yaw-only poses, `log4(a⁻¹ b)`.
pub fn pose4_error(a: &Pose4, b: &Pose4) -> Vector4<f64> {
    log4(&a.between(b))
}

/// A [`Pose4`] carrying its Jacobian with respect to a set of scalar parameters.
///
/// Used to assemble analytic derivatives of chains such as `Z⁻¹ (A xᵢ)⁻¹ (B xⱼ)`.
#[derive(Debug, Clone)]
pub struct Pose4Jet {
    pub value: Pose4,
    pub jacobian: DMatrix<f64>,
}

impl Pose4Jet {
    pub fn constant(value: Pose4, n_params: usize) -> Self {
        Self {
            value,
            jacobian: DMatrix::zeros(4, n_params),
        }
    }

    /// The pose occupies parameters `offset..offset + 4`.
    pub fn variable(value: Pose4, offset: usize, n_params: usize) -> Self {
        let mut jacobian = DMatrix::zeros(4, n_params);
        for k in 0..4 {
            jacobian[(k, offset + k)] = 1.0;
        }
        Self { value, jacobian }
    }

    pub fn compose(&self, other: &Pose4Jet) -> Pose4Jet {
        let a = &self.value;
        let b = &other.value;
        let mut ja = Matrix4::identity();
        let dr = rot_z_derivative(a.theta) * b.translation();
        ja[(0, 3)] = dr.x;
        ja[(1, 3)] = dr.y;
        ja[(2, 3)] = dr.z;
        let mut jb = Matrix4::zeros();
        jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_z(a.theta));
        jb[(3, 3)] = 1.0;
        Pose4Jet {
            value: a.compose(b),
            jacobian: mat4_times(&ja, &self.jacobian) + mat4_times(&jb, &other.jacobian),
        }
    }

    pub fn inverse(&self) -> Pose4Jet {
        let a = &self.value;
        let mut j = Matrix4::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot_z(-a.theta)));
        let dr = rot_z_derivative(-a.theta) * a.translation();
        j[(0, 3)] = dr.x;
        j[(1, 3)] = dr.y;
        j[(2, 3)] = dr.z;
        j[(3, 3)] = -1.0;
        Pose4Jet {
            value: a.inverse(),
            jacobian: mat4_times(&j, &self.jacobian),
        }
    }

    /// Reduced log and its Jacobian.
    pub fn log(&self) -> (Vector4<f64>, DMatrix<f64>) {
        (
            log4(&self.value),
            mat4_times(&log4_jacobian(&self.value), &self.jacobian),
        )
    }
}

fn mat4_times(m: &Matrix4<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(4, j.ncols());
    for c in 0..j.ncols() {
        for r in 0..4 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += m[(r, k)] * j[(k, c)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}
