//! SE(3) primitives and quaternion algebra.
//!
//! Quaternions are Hamilton, scalar-first `(w, x, y, z)`, right-handed. A
//! quaternion `q` rotates a vector `v` as `q v q⁻¹`, and `a * b` applies `b`
//! first, then `a`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Relative eigenvalue gap below which the top eigenvector of an averaging
/// matrix is considered ambiguous.
const AVERAGE_GAP_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion components must be finite and non-zero, got {0:?}")]
    InvalidQuaternion([f64; 4]),
    #[error("cannot average an empty set of quaternions")]
    EmptyAverage,
    #[error("{quaternions} quaternions but {weights} weights")]
    WeightCountMismatch { quaternions: usize, weights: usize },
    #[error("averaging weights must be finite and non-negative, got {0}")]
    InvalidWeight(f64),
    #[error("averaging weights sum to {0}, expected a positive total")]
    ZeroWeightSum(f64),
    #[error("ambiguous quaternion average: top eigenvalues {0} and {1} coincide")]
    AmbiguousAverage(f64, f64),
}

/// A rotation stored as a unit quaternion.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UnitQuaternion({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        // Unit up to rounding: keep the bits so serialized values round-trip exactly.
        let n2: f64 = c.iter().map(|v| v * v).sum();
        if c.iter().all(|v| v.is_finite()) && (n2 - 1.0).abs() <= 8.0 * f64::EPSILON {
            return Ok(Self { w: c[0], x: c[1], y: c[2], z: c[3] });
        }
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes `(w, x, y, z)` into a unit quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(GeometryError::InvalidQuaternion([w, x, y, z]));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    /// Rotation of `angle` radians about `axis`. A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 || angle == 0.0 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::renormalized(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map: the rotation whose axis is `v / |v|` and angle `|v|`.
    pub fn from_scaled_axis(v: &Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), yaw)
    }

    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let q = nalgebra::UnitQuaternion::from_matrix(m);
        Self::renormalized(q.w, q.i, q.j, q.k)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn vector_part(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// The same rotation with a non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn inverse(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let c = self.canonical();
        2.0 * c.vector_part().norm().atan2(c.w)
    }

    /// Logarithm map on the shortest arc; the norm of the result is in `[0, π]`.
    pub fn scaled_axis(&self) -> Vec3 {
        let c = self.canonical();
        let v = c.vector_part();
        let s = v.norm();
        if s < 1e-300 {
            return Vec3::zeros();
        }
        let angle = 2.0 * s.atan2(c.w);
        v * (angle / s)
    }

    /// Sign-invariant angular distance between two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Raises the rotation to a real power by scaling its shortest-arc angle.
    pub fn powf(&self, n: f64) -> Self {
        Self::from_scaled_axis(&(self.scaled_axis() * n))
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector_part();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
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

    /// Heading of the rotated x axis in the world xy plane.
    pub fn yaw(&self) -> f64 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, b: UnitQuaternion) -> UnitQuaternion {
        let a = self;
        UnitQuaternion::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Weighted average rotation: the principal eigenvector of `Σ wᵢ qᵢ qᵢᵀ`.
///
/// The result maximizes `Σ wᵢ (q·qᵢ)²`, so it is insensitive to the sign of
/// each input. It is returned with a non-negative scalar part.
pub fn average_quaternions(
    qs: &[UnitQuaternion],
    weights: &[f64],
) -> Result<UnitQuaternion, GeometryError> {
    if qs.is_empty() {
        return Err(GeometryError::EmptyAverage);
    }
    if qs.len() != weights.len() {
        return Err(GeometryError::WeightCountMismatch {
            quaternions: qs.len(),
            weights: weights.len(),
        });
    }
    let mut total = 0.0;
    let mut m = Matrix4::<f64>::zeros();
    for (q, &w) in qs.iter().zip(weights) {
        if !w.is_finite() || w < 0.0 {
            return Err(GeometryError::InvalidWeight(w));
        }
        total += w;
        let v = q.coords();
        m += w * v * v.transpose();
    }
    if total <= 0.0 {
        return Err(GeometryError::ZeroWeightSum(total));
    }
    m /= total;

    let (values, vectors) = symmetric_eigen4(&m);
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let (top, second) = (values[order[0]], values[order[1]]);
    if top - second <= AVERAGE_GAP_TOLERANCE * top.abs().max(f64::MIN_POSITIVE) {
        return Err(GeometryError::AmbiguousAverage(top, second));
    }
    let v = vectors.column(order[0]);
    let q = UnitQuaternion::new(v[0], v[1], v[2], v[3])?;
    Ok(q.canonical())
}

/// Cyclic Jacobi eigen-decomposition of a symmetric 4×4 matrix.
///
/// Returns eigenvalues (unsorted) and the matching eigenvectors as columns.
/// Sweeps stop once the off-diagonal Frobenius norm falls below
/// `1e-12 · ‖M‖_F` or after 64 sweeps, whichever comes first.
pub fn symmetric_eigen4(m: &Matrix4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
    let mut a = *m;
    let mut v = Matrix4::<f64>::identity();
    let scale = m.norm();
    if scale == 0.0 {
        return (Vector4::zeros(), v);
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..4 {
            for q in (p + 1)..4 {
                off += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= JACOBI_TOLERANCE * scale {
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// A rigid transform: position in meters plus orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    #[serde(rename = "pos", with = "vec3_array")]
    pub position: Vec3,
    #[serde(rename = "quat")]
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion) -> Self {
        Self { position, orientation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_position(position: Vec3) -> Self {
        Self { position, orientation: UnitQuaternion::identity() }
    }

    /// Planar pose at height zero with heading `yaw`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(Vec3::new(x, y, 0.0), UnitQuaternion::from_yaw(yaw))
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame, mapped to the parent.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation.rotate(&other.position),
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose { position: -inv.rotate(&self.position), orientation: inv }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.orientation.inverse().rotate(&(p - self.position))
    }

    /// This pose expressed in `frame`.
    pub fn relative_to(&self, frame: &Pose) -> Pose {
        frame.inverse().compose(self)
    }

    pub fn translated(&self, delta: &Vec3) -> Pose {
        Pose { position: self.position + delta, orientation: self.orientation }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite())
    }
}

/// Spatial velocity: linear in m/s and angular in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Twist {
    #[serde(with = "vec3_array")]
    pub linear: Vec3,
    #[serde(with = "vec3_array")]
    pub angular: Vec3,
}

impl Twist {
    pub fn new(linear: Vec3, angular: Vec3) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, factor: f64) -> Twist {
        Twist { linear: self.linear * factor, angular: self.angular * factor }
    }

    /// Re-expresses both components with the rotation `q`.
    pub fn rotated(&self, q: &UnitQuaternion) -> Twist {
        Twist { linear: q.rotate(&self.linear), angular: q.rotate(&self.angular) }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|c| c.is_finite())
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;

    fn sub(self, rhs: Twist) -> Twist {
        Twist { linear: self.linear - rhs.linear, angular: self.angular - rhs.angular }
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Serializes a `Vector3<f64>` as a plain `[x, y, z]` array.
pub mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn identity_is_neutral() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 2.0, -0.5), 0.7);
        assert!((UnitQuaternion::identity() * q).angle_to(&q) < 1e-12);
        assert!((q * UnitQuaternion::identity()).angle_to(&q) < 1e-12);
    }

    #[test]
    fn inverse_cancels() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 2.1);
        assert!((q * q.inverse()).angle() < 1e-12);
    }

    #[test]
    fn shared_axis_angles_add() {
        let q = UnitQuaternion::from_yaw(FRAC_PI_2);
        let r = q * q;
        assert_abs_diff_eq!(r.angle(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(r.scaled_axis().normalize().z.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn power_cases() {
        assert!(UnitQuaternion::identity().powf(3.0).angle() < 1e-15);
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.2, 0.4, 1.0), 0.9);
        assert!(q.powf(1.0).angle_to(&q) < 1e-12);
        let p = UnitQuaternion::from_axis_angle(&Vec3::x(), deg(30.0)).powf(3.0);
        assert!(p.angle_to(&UnitQuaternion::from_axis_angle(&Vec3::x(), deg(90.0))) < 1e-12);
    }

    #[test]
    fn power_uses_shortest_arc() {
        // -q and q are the same rotation, so their powers must agree.
        let q = UnitQuaternion::from_axis_angle(&Vec3::y(), 0.4);
        let neg = UnitQuaternion::new(-q.w(), -q.x(), -q.y(), -q.z()).unwrap();
        assert!(q.powf(2.5).angle_to(&neg.powf(2.5)) < 1e-12);
    }

    #[test]
    fn rotate_cases() {
        let v = Vec3::new(0.3, -2.0, 1.5);
        assert_abs_diff_eq!(UnitQuaternion::identity().rotate(&v), v, epsilon = 1e-15);
        let r = UnitQuaternion::from_yaw(FRAC_PI_2).rotate(&Vec3::x());
        assert_abs_diff_eq!(r, Vec3::y(), epsilon = 1e-15);
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 1.0);
        assert_eq!(q.rotate(&Vec3::zeros()), Vec3::zeros());
    }

    #[test]
    fn rotation_matrix_matches_rotate() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.1, -0.7, 0.4), 2.4);
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_abs_diff_eq!(q.to_rotation_matrix() * v, q.rotate(&v), epsilon = 1e-12);
        let back = UnitQuaternion::from_rotation_matrix(&q.to_rotation_matrix());
        assert!(back.angle_to(&q) < 1e-9);
    }

    #[test]
    fn average_identical_inputs() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 0.5, 0.2), 0.8);
        let avg = average_quaternions(&[q, q], &[1.0, 1.0]).unwrap();
        assert!(avg.angle_to(&q) < 1e-12);
    }

    #[test]
    fn average_is_sign_invariant() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.0, 1.0, 0.2), 1.3);
        let neg = UnitQuaternion::new(-q.w(), -q.x(), -q.y(), -q.z()).unwrap();
        let avg = average_quaternions(&[q, neg], &[1.0, 1.0]).unwrap();
        assert!(avg.angle_to(&q) < 1e-12);
        assert!(avg.w() >= 0.0);
    }

    #[test]
    fn average_of_two_yaws_by_grid_search() {
        // Oracle: maximize Σ wᵢ (q·qᵢ)² over rotations about z on a 1e-5 rad grid.
        let qs = [UnitQuaternion::from_yaw(deg(10.0)), UnitQuaternion::from_yaw(deg(30.0))];
        let objective = |yaw: f64| {
            let c = UnitQuaternion::from_yaw(yaw);
            qs.iter().map(|q| c.dot(q).powi(2)).sum::<f64>()
        };
        let (mut best, mut best_val) = (0.0, f64::MIN);
        let mut yaw = 0.0;
        while yaw <= deg(40.0) {
            let v = objective(yaw);
            if v > best_val {
                best_val = v;
                best = yaw;
            }
            yaw += 1e-5;
        }
        assert_abs_diff_eq!(best, deg(20.0), epsilon = 2e-5);
        let avg = average_quaternions(&qs, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(avg.yaw(), best, epsilon = 2e-5);
        assert_abs_diff_eq!(avg.yaw(), deg(20.0), epsilon = 1e-12);
    }

    #[test]
    fn average_rejects_ties_and_bad_input() {
        let a = UnitQuaternion::identity();
        let b = UnitQuaternion::from_yaw(PI);
        assert!(matches!(
            average_quaternions(&[a, b], &[1.0, 1.0]),
            Err(GeometryError::AmbiguousAverage(..))
        ));
        assert_eq!(average_quaternions(&[], &[]), Err(GeometryError::EmptyAverage));
        assert!(matches!(
            average_quaternions(&[a], &[1.0, 2.0]),
            Err(GeometryError::WeightCountMismatch { .. })
        ));
        assert!(matches!(
            average_quaternions(&[a], &[0.0]),
            Err(GeometryError::ZeroWeightSum(_))
        ));
        assert!(matches!(
            average_quaternions(&[a], &[-1.0]),
            Err(GeometryError::InvalidWeight(_))
        ));
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn pose_compose_and_inverse() {
        let a = Pose::new(Vec3::new(1.0, 2.0, 0.5), UnitQuaternion::from_yaw(0.7));
        let b = Pose::new(Vec3::new(-0.3, 0.1, 0.2), UnitQuaternion::from_axis_angle(&Vec3::x(), 0.4));
        let ab = a.compose(&b);
        let back = ab.relative_to(&a);
        assert_abs_diff_eq!(back.position, b.position, epsilon = 1e-12);
        assert!(back.orientation.angle_to(&b.orientation) < 1e-12);
        let id = a.compose(&a.inverse());
        assert!(id.position.norm() < 1e-12 && id.orientation.angle() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(7.0), 7.0 - std::f64::consts::TAU, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_serializes_as_array() {
        let q = UnitQuaternion::from_yaw(0.3);
        let s = serde_json::to_string(&q).unwrap();
        let back: UnitQuaternion = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
        assert!(serde_json::from_str::<UnitQuaternion>("[0,0,0,0]").is_err());
        let scaled: UnitQuaternion = serde_json::from_str("[2,0,0,0]").unwrap();
        assert_eq!(scaled, UnitQuaternion::identity());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = UnitQuaternion> {
            (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
                .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
                .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z).unwrap())
        }

        proptest! {
            #[test]
            fn rotate_preserves_norm(q in quat(), x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
                let v = Vec3::new(x, y, z);
                prop_assert!((q.rotate(&v).norm() - v.norm()).abs() < 1e-9);
            }

            #[test]
            fn json_round_trip_is_bit_exact(a in quat(), b in quat()) {
                let q = a * b;
                let back: UnitQuaternion = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
                prop_assert_eq!(<[f64; 4]>::from(back), <[f64; 4]>::from(q));
            }

            #[test]
            fn products_stay_unit(a in quat(), b in quat()) {
                prop_assert!(((a * b).coords().norm() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn power_is_additive(
                axis in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
                angle in 0.0..1.0f64,
                a in 0.0..1.5f64,
                b in 0.0..1.5f64,
            ) {
                let axis = Vec3::new(axis.0, axis.1, axis.2);
                prop_assume!(axis.norm() > 1e-3);
                prop_assume!(angle * (a + b) < PI - 1e-3);
                let q = UnitQuaternion::from_axis_angle(&axis, angle);
                let lhs = q.powf(a + b);
                let rhs = q.powf(a) * q.powf(b);
                prop_assert!(lhs.angle_to(&rhs) < 1e-9);
            }

            #[test]
            fn average_ignores_input_signs(qs in prop::collection::vec(quat(), 1..6), flip in 0usize..6) {
                let near: Vec<UnitQuaternion> = qs
                    .iter()
                    .map(|q| UnitQuaternion::from_scaled_axis(&(q.scaled_axis() * 0.2)))
                    .collect();
                let weights: Vec<f64> = (0..near.len()).map(|i| 1.0 / (1 << i) as f64).collect();
                let base = average_quaternions(&near, &weights).unwrap();
                let mut flipped = near.clone();
                let i = flip % flipped.len();
                let q = flipped[i];
                flipped[i] = UnitQuaternion::new(-q.w(), -q.x(), -q.y(), -q.z()).unwrap();
                let other = average_quaternions(&flipped, &weights).unwrap();
                prop_assert!(base.angle_to(&other) < 1e-9);
            }
        }
    }
}
