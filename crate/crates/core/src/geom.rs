//! Rigid-body transforms and their tangent space.
//!
//! A [`Pose`] is a rigid transform `p_out = R * p_in + t`. Throughout the
//! crate poses map *world* coordinates into a sensor-side frame (platform,
//! hub or laser), so applying the inverse recovers world coordinates.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Body-centric velocity: linear part in m/s, angular part in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().all(|v| v.is_finite()) && self.angular.iter().all(|v| v.is_finite())
    }

    /// Scale both parts, e.g. by a time step.
    pub fn scaled(&self, s: f64) -> Self {
        Twist {
            linear: self.linear * s,
            angular: self.angular * s,
        }
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::from_rotation_matrix(&rotation),
            translation,
        }
    }

    /// Pure translation.
    pub fn translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: t,
        }
    }

    /// Rotation about the z-axis by `angle` radians, no translation.
    pub fn rot_z(angle: f64) -> Self {
        Pose {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Apply the inverse transform without materializing it.
    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Exponential map: twist integrated over unit time.
    pub fn exp(xi: &Twist) -> Pose {
        let phi = xi.angular;
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        let translation = left_jacobian(&phi) * xi.linear;
        Pose {
            rotation,
            translation,
        }
    }

    /// Logarithmic map, inverse of [`Pose::exp`].
    pub fn log(&self) -> Twist {
        let phi = self.rotation.scaled_axis();
        let linear = left_jacobian_inv(&phi) * self.translation;
        Twist {
            linear,
            angular: phi,
        }
    }

    /// Geodesic interpolation from identity: `exp(alpha * log(self))`.
    pub fn scaled_log_exp(&self, alpha: f64) -> Pose {
        Pose::exp(&self.log().scaled(alpha))
    }

    /// Max absolute difference over rotation-matrix entries and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation_matrix() - other.rotation_matrix()).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) left Jacobian: `J = I + (1-cosθ)/θ² Ω + (θ-sinθ)/θ³ Ω²`.
fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let omega = skew(phi);
    if theta < 1e-6 {
        // Series to second order; enough for f64 below the cutover.
        let t2 = theta * theta;
        Matrix3::identity() + omega * (0.5 - t2 / 24.0) + omega * omega * (1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + omega * ((1.0 - theta.cos()) / t2)
            + omega * omega * ((theta - theta.sin()) / (t2 * theta))
    }
}

/// Inverse of the SO(3) left Jacobian.
fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let omega = skew(phi);
    let coeff = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        // (1 - θ/2 · cot(θ/2)) / θ², stable for θ up to π.
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - omega * 0.5 + omega * omega * coeff
}

/// Rebuild a unit quaternion from stored components. Values that are unit
/// to f64 precision are taken as-is (keeps file round-trips bit-exact);
/// slightly off-unit values are renormalized; anything worse is rejected.
pub fn unit_quaternion_from_parts(w: f64, x: f64, y: f64, z: f64) -> Option<UnitQuaternion<f64>> {
    let q = nalgebra::Quaternion::new(w, x, y, z);
    let err = (q.norm() - 1.0).abs();
    if err <= 1e-12 {
        Some(UnitQuaternion::new_unchecked(q))
    } else if err <= 1e-6 {
        Some(UnitQuaternion::from_quaternion(q))
    } else {
        None
    }
}

/// Rotation matrix about z by `angle`, as used for the spinning hub.
#[inline]
pub fn rot_z_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
