//! Rigid transforms in SE(3) and their twist coordinates.
//!
//! Rotations are stored as 3x3 matrices. The exponential and logarithm use
//! the closed-form Rodrigues expressions, switching to Taylor series for
//! small angles where the closed forms cancel catastrophically.

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Angles below this use series expansions.
const SMALL_ANGLE: f64 = 1e-4;
/// Principal-branch margin for the logarithm.
pub const BRANCH_MARGIN: f64 = 1e-6;
/// Compositions between re-orthonormalizations.
const REORTHO_EVERY: u32 = 100;

/// Skew-symmetric matrix of `v`, so that `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Coordinates of an se(3) element: rotation vector and translational part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist6 {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist6 {
    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Stacked `[angular; linear]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.angular * s, self.linear * s)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_vector().amax()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

impl Neg for Twist6 {
    type Output = Twist6;
    fn neg(self) -> Twist6 {
        self.scaled(-1.0)
    }
}

/// A rigid transform `{}^A T_B` mapping coordinates in frame B to frame A.
#[derive(Clone, Copy)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    // compositions since the rotation was last projected back onto SO(3)
    drift: u32,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pose")
            .field("rotation", &self.rotation)
            .field("translation", &self.translation)
            .finish()
    }
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::zeros())
    }

    /// Builds a pose without checking the rotation.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            drift: 0,
        }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal within `1e-9`.
    pub fn try_new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self::from_parts(rotation, translation);
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        if pose.orthonormality_error() > 1e-9 {
            return Err(Error::InvalidParameter(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_parts(rotation_about(axis, angle), Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            drift: self.drift.max(other.drift) + 1,
        };
        if out.drift >= REORTHO_EVERY {
            out.reorthonormalize();
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            drift: self.drift,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects the rotation onto the closest proper rotation (polar decomposition).
    pub fn reorthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rotation = r;
        self.drift = 0;
    }

    /// Max elementwise deviation of `R^T R` from identity plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        e + (self.rotation.determinant() - 1.0).abs()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = 0.5 * (self.rotation.trace() - 1.0);
        let s = vee(&self.rotation).norm();
        s.atan2(c)
    }

    /// Max elementwise difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Pose> {
        let r = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Pose::try_new(r, Vector3::new(a[9], a[10], a[11]))
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Pose, D::Error> {
        let a = <[f64; 12]>::deserialize(d)?;
        Pose::from_array(&a).map_err(serde::de::Error::custom)
    }
}

/// Rodrigues rotation about an arbitrary (non-zero) axis.
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    so3_exp(&(axis.normalize() * angle))
}

fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        let h = (0.5 * theta).sin() / theta;
        (theta.sin() / theta, 2.0 * h * h)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// SE(3) exponential of a twist.
pub fn exp_map(xi: &Twist6) -> Result<Pose> {
    if !xi.is_finite() {
        return Err(Error::NonFinite("twist"));
    }
    let w = &xi.angular;
    let theta = w.norm();
    let k = hat(w);
    let rotation = so3_exp(w);
    // left Jacobian V = I + b K + c K^2
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let h = (0.5 * theta).sin() / theta;
        (2.0 * h * h, (theta - theta.sin()) / (theta * theta * theta))
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    Ok(Pose::from_parts(rotation, v * xi.linear))
}

/// SE(3) logarithm on the principal branch (rotation angle below `pi - 1e-6`).
pub fn log_map(p: &Pose) -> Result<Twist6> {
    let r = p.rotation();
    if !r.iter().chain(p.translation().iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("pose"));
    }
    let skew = vee(r);
    let s = skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - BRANCH_MARGIN {
        return Err(Error::BranchCut { angle: theta });
    }

    let w = if theta < SMALL_ANGLE {
        // skew = sin(theta) * axis
        let t2 = theta * theta;
        skew * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    } else if theta < 2.5 {
        skew * (theta / s)
    } else {
        // near pi the skew part is tiny; read the axis from the symmetric part
        let one_minus_c = 1.0 - c;
        let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
        let i = (0..3)
            .max_by(|&a, &b2| b[(a, a)].partial_cmp(&b[(b2, b2)]).unwrap())
            .unwrap();
        let ai = (b[(i, i)] / one_minus_c).max(0.0).sqrt();
        let mut axis = Vector3::zeros();
        for j in 0..3 {
            axis[j] = if j == i { ai } else { b[(i, j)] / (one_minus_c * ai) };
        }
        let axis = axis.normalize();
        let axis = if axis.dot(&skew) < 0.0 { -axis } else { axis };
        axis * theta
    };

    let k = hat(&w);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist6::new(w, v_inv * p.translation()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_of_zero_is_identity() {
        let p = exp_map(&Twist6::zero()).unwrap();
        assert_eq!(p.max_abs_diff(&Pose::identity()), 0.0);
    }

    #[test]
    fn exp_pure_rotation_about_z() {
        let p = exp_map(&Twist6::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros())).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation() - expected).amax() < 1e-15);
        assert!(p.translation().amax() < 1e-15);
    }

    #[test]
    fn exp_pure_translation() {
        let p = exp_map(&Twist6::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0))).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_rejects_non_finite() {
        let xi = Twist6::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(exp_map(&xi), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_identity_and_quarter_turn() {
        assert_eq!(log_map(&Pose::identity()).unwrap().max_abs(), 0.0);
        let p = Pose::from_axis_angle(&Vector3::z(), FRAC_PI_2);
        let xi = log_map(&p).unwrap();
        assert!((xi.angular - Vector3::new(0.0, 0.0, FRAC_PI_2)).amax() < 1e-15);
        assert!(xi.linear.amax() < 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = Pose::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), std::f64::consts::PI);
        assert!(matches!(log_map(&p), Err(Error::BranchCut { .. })));
    }

    #[test]
    fn log_near_pi_uses_symmetric_branch() {
        let xi = Twist6::new(
            Vector3::new(0.3, -2.0, 2.3).normalize() * 3.1,
            Vector3::new(0.1, 0.2, -0.4),
        );
        let back = log_map(&exp_map(&xi).unwrap()).unwrap();
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = exp_map(&Twist6::new(Vector3::new(0.4, -0.2, 1.1), Vector3::new(1.0, -3.0, 0.5)))
            .unwrap();
        assert!((p * p.inverse()).max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn long_composition_chains_stay_orthonormal() {
        let step = exp_map(&Twist6::new(Vector3::new(0.31, 0.17, -0.23), Vector3::new(0.1, 0.0, 0.2)))
            .unwrap();
        let mut p = Pose::identity();
        for _ in 0..10_000 {
            p = p * step;
        }
        assert!(p.orthonormality_error() < 1e-9);
    }

    #[test]
    fn json_is_twelve_numbers() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[1.0,0.0,0.0,0.0,1.0,0.0,0.0,0.0,1.0,1.0,2.0,3.0]");
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Pose>("[2,0,0,0,1,0,0,0,1,0,0,0]").is_err());
    }
}
