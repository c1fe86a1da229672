//! SE(3) arithmetic and rotation-representation conversions.
//!
//! Rotations are stored as 3×3 matrices in double precision. Quaternions are
//! scalar-first `(w, x, y, z)` and canonicalised to `w ≥ 0`.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `R·Rᵀ = I` and `det R = 1` for [`Rotation3::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Below this angle the rotation maps switch to truncated series.
const SMALL_ANGLE: f64 = 1e-8;

/// A proper rotation of 3-space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Mat3);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Mat3::identity())
    }

    /// Validates orthonormality and orientation of `m`.
    pub fn new(m: Mat3) -> Result<Self> {
        let ortho = (m * m.transpose() - Mat3::identity()).abs().max();
        let det = m.determinant();
        if !ortho.is_finite() || ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(Error::Format(format!(
                "not a rotation: orthogonality error {ortho:e}, det {det}"
            )));
        }
        Ok(Rotation3(m))
    }

    /// Wraps `m` without validation. The caller guarantees it is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation3(m)
    }

    pub fn from_axis_angle(v: &Vec3) -> Self {
        axis_angle_to_rotation(v)
    }

    pub fn to_axis_angle(&self) -> Vec3 {
        rotation_to_axis_angle(self)
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn about_z(angle: f64) -> Self {
        axis_angle_to_rotation(&Vec3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    /// Angle of the relative rotation `selfᵀ·other`, in `[0, π]`.
    pub fn geodesic(&self, other: &Rotation3) -> f64 {
        Rotation3(self.0.transpose() * other.0).angle()
    }

    pub fn angle(&self) -> f64 {
        rotation_to_axis_angle(self).norm()
    }

    /// Snaps an almost-orthonormal matrix (accumulated roundoff) back onto SO(3).
    pub fn renormalized(&self) -> Self {
        nearest_rotation(&self.0).map(|(r, _)| r).unwrap_or(*self)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for &Rotation3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// A rigid motion `p ↦ R·p + t`; the action type for every policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rot: Rotation3,
    pub trans: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rot: Rotation3, trans: Vec3) -> Self {
        RigidTransform { rot, trans }
    }

    pub fn identity() -> Self {
        RigidTransform {
            rot: Rotation3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn from_translation(trans: Vec3) -> Self {
        RigidTransform {
            rot: Rotation3::identity(),
            trans,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rot.0 * p + self.trans
    }

    pub fn apply(&self, pts: &[Vec3]) -> Vec<Vec3> {
        apply(self, pts)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rot.inverse();
        RigidTransform {
            rot: rt,
            trans: -(rt.0 * self.trans),
        }
    }

    /// Row-major rotation entries followed by the translation.
    pub fn to_flat(&self) -> ([f64; 9], [f64; 3]) {
        (self.rot.to_row_major(), [self.trans.x, self.trans.y, self.trans.z])
    }

    pub fn from_flat(rot: &[f64], trans: &[f64]) -> Result<Self> {
        if rot.len() != 9 || trans.len() != 3 {
            return Err(Error::Format(format!(
                "transform needs 9 + 3 entries, got {} + {}",
                rot.len(),
                trans.len()
            )));
        }
        Ok(RigidTransform {
            rot: Rotation3::new(Mat3::from_row_slice(rot))?,
            trans: Vec3::from_column_slice(trans),
        })
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rot: Rotation3(a.rot.0 * b.rot.0),
        trans: a.rot.0 * b.trans + a.trans,
    }
}

pub fn apply(t: &RigidTransform, pts: &[Vec3]) -> Vec<Vec3> {
    pts.iter().map(|p| t.apply_point(p)).collect()
}

/// Skew-symmetric matrix with `skew(a)·b = a × b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. `‖v‖` is the angle in radians about `v/‖v‖`.
pub fn axis_angle_to_rotation(v: &Vec3) -> Rotation3 {
    let theta = v.norm();
    let k = skew(v);
    if theta < SMALL_ANGLE {
        return Rotation3(Mat3::identity() + k + 0.5 * k * k);
    }
    let (s, c) = theta.sin_cos();
    let a = s / theta;
    let b = (1.0 - c) / (theta * theta);
    Rotation3(Mat3::identity() + a * k + b * k * k)
}

/// Inverse of [`axis_angle_to_rotation`] with angle in `[0, π]`.
///
/// At angle π the axis is chosen so that its largest-magnitude component is
/// positive.
pub fn rotation_to_axis_angle(r: &Rotation3) -> Vec3 {
    let [w, x, y, z] = matrix_to_quaternion(&r.0);
    let v = Vec3::new(x, y, z);
    let n = v.norm();
    if n < SMALL_ANGLE {
        // sin(θ/2) ≈ θ/2
        return 2.0 * v;
    }
    let angle = 2.0 * n.atan2(w);
    let mut axis = v / n;
    if w <= 1e-12 {
        let lead = axis.iamax();
        if axis[lead] < 0.0 {
            axis = -axis;
        }
    }
    angle * axis
}

/// Derivatives `∂R/∂vᵢ` of the Rodrigues map, one matrix per component.
pub fn axis_angle_jacobian(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2.sqrt() < 1e-6 {
        let kv = skew(v);
        return e.map(|ei| {
            let ke = skew(&ei);
            ke + 0.5 * (ke * kv + kv * ke)
        });
    }
    let r = axis_angle_to_rotation(v).0;
    let kv = skew(v);
    let i_minus_r = Mat3::identity() - r;
    e.map(|ei| (v.dot(&ei) * kv + skew(&v.cross(&(i_minus_r * ei)))) * r / theta2)
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` (Shepperd's method).
pub fn matrix_to_quaternion(m: &Mat3) -> [f64; 4] {
    let tr = m.trace();
    let (m00, m11, m22) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let q = if tr >= m00 && tr >= m11 && tr >= m22 {
        let s = 2.0 * (1.0 + tr).sqrt();
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m00 >= m11 && m00 >= m22 {
        let s = 2.0 * (1.0 + m00 - m11 - m22).sqrt();
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m11 >= m22 {
        let s = 2.0 * (1.0 + m11 - m00 - m22).sqrt();
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + m22 - m00 - m11).sqrt();
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|c| sign * c / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
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

/// SVD of a 3×3 matrix with singular values sorted in decreasing order.
///
/// Returns `(U, s, V)` with `M = U·diag(s)·Vᵀ`.
pub fn svd3(m: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut us = Mat3::zeros();
    let mut vs = Mat3::zeros();
    let mut ss = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        ss[dst] = s[src];
    }
    (us, ss, vs)
}

/// Closest rotation to `m` in Frobenius norm, with the reflection folded
/// into the smallest singular direction. Also returns the singular values.
pub fn nearest_rotation(m: &Mat3) -> Option<(Rotation3, [f64; 3])> {
    if !m.iter().all(|x| x.is_finite()) {
        return None;
    }
    let (u, s, v) = svd3(m);
    let d = (u * v.transpose()).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v.transpose();
    Some((Rotation3(r), s))
}

/// The rotation parameterizations used by direct-regression baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationKind {
    AxisAngle3,
    Quat4,
    SixD,
    NineD,
    TenD,
}

impl RotationKind {
    pub const ALL: [RotationKind; 5] = [
        RotationKind::AxisAngle3,
        RotationKind::Quat4,
        RotationKind::SixD,
        RotationKind::NineD,
        RotationKind::TenD,
    ];

    pub fn dim(self) -> usize {
        match self {
            RotationKind::AxisAngle3 => 3,
            RotationKind::Quat4 => 4,
            RotationKind::SixD => 6,
            RotationKind::NineD => 9,
            RotationKind::TenD => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RotationKind::AxisAngle3 => "axis-angle",
            RotationKind::Quat4 => "quat",
            RotationKind::SixD => "6d",
            RotationKind::NineD => "9d",
            RotationKind::TenD => "10d",
        }
    }
}

impl fmt::Display for RotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RotationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown rotation representation `{s}`")))
    }
}

/// A raw rotation parameter vector of one of the supported kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum RotationRepr {
    AxisAngle3([f64; 3]),
    Quat4([f64; 4]),
    SixD([f64; 6]),
    NineD([f64; 9]),
    TenD([f64; 10]),
}

impl RotationRepr {
    pub fn from_slice(kind: RotationKind, data: &[f64]) -> Result<Self> {
        if data.len() != kind.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{kind} representation needs {} values, got {}",
                kind.dim(),
                data.len()
            )));
        }
        Ok(match kind {
            RotationKind::AxisAngle3 => RotationRepr::AxisAngle3(data.try_into().unwrap()),
            RotationKind::Quat4 => RotationRepr::Quat4(data.try_into().unwrap()),
            RotationKind::SixD => RotationRepr::SixD(data.try_into().unwrap()),
            RotationKind::NineD => RotationRepr::NineD(data.try_into().unwrap()),
            RotationKind::TenD => RotationRepr::TenD(data.try_into().unwrap()),
        })
    }

    pub fn kind(&self) -> RotationKind {
        match self {
            RotationRepr::AxisAngle3(_) => RotationKind::AxisAngle3,
            RotationRepr::Quat4(_) => RotationKind::Quat4,
            RotationRepr::SixD(_) => RotationKind::SixD,
            RotationRepr::NineD(_) => RotationKind::NineD,
            RotationRepr::TenD(_) => RotationKind::TenD,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            RotationRepr::AxisAngle3(d) => d,
            RotationRepr::Quat4(d) => d,
            RotationRepr::SixD(d) => d,
            RotationRepr::NineD(d) => d,
            RotationRepr::TenD(d) => d,
        }
    }

    /// Canonical encoding of `r`; `project_to_rotation` maps it back to `r`.
    pub fn encode(r: &Rotation3, kind: RotationKind) -> Self {
        let m = r.matrix();
        match kind {
            RotationKind::AxisAngle3 => {
                let v = rotation_to_axis_angle(r);
                RotationRepr::AxisAngle3([v.x, v.y, v.z])
            }
            RotationKind::Quat4 => RotationRepr::Quat4(matrix_to_quaternion(m)),
            RotationKind::SixD => RotationRepr::SixD([
                m[(0, 0)],
                m[(1, 0)],
                m[(2, 0)],
                m[(0, 1)],
                m[(1, 1)],
                m[(2, 1)],
            ]),
            RotationKind::NineD => RotationRepr::NineD(r.to_row_major()),
            RotationKind::TenD => {
                // I − q·qᵀ has q as its null vector.
                let q = matrix_to_quaternion(m);
                let mut out = [0.0; 10];
                let mut k = 0;
                for i in 0..4 {
                    for j in i..4 {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        out[k] = delta - q[i] * q[j];
                        k += 1;
                    }
                }
                RotationRepr::TenD(out)
            }
        }
    }
}

/// Maps any representation onto SO(3).
///
/// * axis-angle: Rodrigues.
/// * quaternion: normalised, scalar first.
/// * 6D: Gram–Schmidt on the two stored columns, third column by cross product.
/// * 9D: nearest rotation by SVD with determinant correction.
/// * 10D: upper triangle (row-major) of a symmetric 4×4; the eigenvector of the
///   smallest eigenvalue is read as a quaternion.
pub fn project_to_rotation(repr: &RotationRepr) -> Result<Rotation3> {
    match repr {
        RotationRepr::AxisAngle3(v) => Ok(axis_angle_to_rotation(&Vec3::from_column_slice(v))),
        RotationRepr::Quat4(q) => {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(n >= 1e-12) {
                return Err(Error::DegenerateRepr(format!("quaternion norm {n:e}")));
            }
            Ok(Rotation3(quaternion_to_matrix(q.map(|c| c / n))))
        }
        RotationRepr::SixD(d) => {
            let a1 = Vec3::new(d[0], d[1], d[2]);
            let a2 = Vec3::new(d[3], d[4], d[5]);
            let (n1, n2) = (a1.norm(), a2.norm());
            let cross = a1.cross(&a2).norm();
            if !(n1 > 1e-12 && n2 > 1e-12 && cross > 1e-9 * n1 * n2) {
                return Err(Error::DegenerateRepr(
                    "6D columns are parallel or zero".into(),
                ));
            }
            let b1 = a1 / n1;
            let b2 = (a2 - b1.dot(&a2) * b1).normalize();
            let b3 = b1.cross(&b2);
            Ok(Rotation3(Mat3::from_columns(&[b1, b2, b3])))
        }
        RotationRepr::NineD(d) => {
            let m = Mat3::from_row_slice(d);
            let (r, s) = nearest_rotation(&m)
                .ok_or_else(|| Error::DegenerateRepr("non-finite 9D input".into()))?;
            if !(s[2] > 1e-9 * s[0]) {
                return Err(Error::DegenerateRepr(format!(
                    "9D matrix has rank < 3 (singular values {s:?})"
                )));
            }
            Ok(r)
        }
        RotationRepr::TenD(d) => {
            let mut a = Matrix4::<f64>::zeros();
            let mut k = 0;
            for i in 0..4 {
                for j in i..4 {
                    a[(i, j)] = d[k];
                    a[(j, i)] = d[k];
                    k += 1;
                }
            }
            if !a.iter().all(|x| x.is_finite()) {
                return Err(Error::DegenerateRepr("non-finite 10D input".into()));
            }
            let eig = SymmetricEigen::new(a);
            let mut best = 0;
            for i in 1..4 {
                if eig.eigenvalues[i] < eig.eigenvalues[best] {
                    best = i;
                }
            }
            let q = eig.eigenvectors.column(best);
            let n = q.norm();
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            Ok(Rotation3(quaternion_to_matrix([
                sign * q[0] / n,
                sign * q[1] / n,
                sign * q[2] / n,
                sign * q[3] / n,
            ])))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        axis_angle_to_rotation(&(axis * rng.random_range(0.0..PI)))
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    fn assert_valid(r: &Rotation3) {
        Rotation3::new(*r.matrix()).expect("valid rotation");
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        assert_eq!(axis_angle_to_rotation(&Vec3::zeros()), Rotation3::identity());
        assert_eq!(rotation_to_axis_angle(&Rotation3::identity()), Vec3::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_rotation(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!((&r * Vec3::x() - Vec3::y()).norm() < 1e-15);
        let v = rotation_to_axis_angle(&r);
        assert!((v - Vec3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
    }

    #[test]
    fn half_turn_tie_break_prefers_positive_lead_component() {
        for axis in [Vec3::x(), -Vec3::y(), Vec3::new(-1.0, 2.0, -3.0).normalize()] {
            let v = rotation_to_axis_angle(&axis_angle_to_rotation(&(axis * PI)));
            assert!((v.norm() - PI).abs() < 1e-9);
            assert!(v[v.iamax()] > 0.0, "{v:?}");
            let back = axis_angle_to_rotation(&v);
            assert!(back.geodesic(&axis_angle_to_rotation(&(axis * PI))) < 1e-9);
        }
    }

    #[test]
    fn axis_angle_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = axis_angle_to_rotation(&rotation_to_axis_angle(&r));
            assert!(r.geodesic(&back) < 1e-9);
        }
    }

    #[test]
    fn quaternion_sign_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let q = matrix_to_quaternion(r.matrix());
            assert!(q[0] >= 0.0);
            assert!((quaternion_to_matrix(q) - r.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rotation_new_rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Rotation3::new(m).is_err());
        assert!(Rotation3::new(Mat3::identity() * 1.01).is_err());
    }

    #[test]
    fn sixd_identity_fixed_point() {
        let r = project_to_rotation(&RotationRepr::SixD([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(r, Rotation3::identity());
    }

    #[test]
    fn nined_projection_of_rotation_is_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        let p = project_to_rotation(&RotationRepr::NineD(r.to_row_major())).unwrap();
        assert!((p.matrix() - r.matrix()).abs().max() < 1e-14);
    }

    /// Brute-force nearest rotation: dense search over axis-angle
    /// perturbations of the noisy input's neighborhood, then local refinement.
    fn brute_force_nearest(m: &Mat3, start: &Rotation3) -> Rotation3 {
        let mut best = *start;
        let mut best_cost = (best.matrix() - m).norm_squared();
        let mut step = 0.05;
        while step > 1e-7 {
            let mut improved = false;
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut dv = Vec3::zeros();
                    dv[axis] = sign * step;
                    let cand = axis_angle_to_rotation(&dv) * best;
                    let cost = (cand.matrix() - m).norm_squared();
                    if cost < best_cost {
                        best = cand;
                        best_cost = cost;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best
    }

    #[test]
    fn nined_noisy_projection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let noisy = r.matrix().map(|x| x + rng.random_range(-1e-3..1e-3));
            let mut data = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    data[3 * i + j] = noisy[(i, j)];
                }
            }
            let p = project_to_rotation(&RotationRepr::NineD(data)).unwrap();
            assert!(p.geodesic(&r) < 1e-2);
            let brute = brute_force_nearest(&noisy, &Rotation3::identity());
            assert!(p.geodesic(&brute) < 1e-5, "{}", p.geodesic(&brute));
        }
    }

    #[test]
    fn encode_then_project_round_trips_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            for kind in RotationKind::ALL {
                let repr = RotationRepr::encode(&r, kind);
                assert_eq!(repr.as_slice().len(), kind.dim());
                let p = project_to_rotation(&repr).unwrap();
                assert!(p.geodesic(&r) < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn degenerate_representations_are_rejected() {
        assert!(matches!(
            project_to_rotation(&RotationRepr::Quat4([0.0; 4])),
            Err(Error::DegenerateRepr(_))
        ));
        assert!(matches!(
            project_to_rotation(&RotationRepr::SixD([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(Error::DegenerateRepr(_))
        ));
        assert!(matches!(
            project_to_rotation(&RotationRepr::NineD([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])),
            Err(Error::DegenerateRepr(_))
        ));
        assert!(RotationRepr::from_slice(RotationKind::SixD, &[0.0; 5]).is_err());
    }

    #[test]
    fn compose_identity_and_translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_transform(&mut rng);
        assert_eq!(compose(&RigidTransform::identity(), &b), b);
        let t1 = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let t2 = RigidTransform::from_translation(Vec3::new(-0.5, 0.25, 4.0));
        let c = compose(&t1, &t2);
        assert_eq!(c.rot, Rotation3::identity());
        assert_eq!(c.trans, Vec3::new(0.5, 2.25, 7.0));
    }

    #[test]
    fn compose_matches_pointwise_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let ab = compose(&a, &b);
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let lhs = ab.apply_point(&p);
            let rhs = a.apply_point(&b.apply_point(&p));
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn apply_identity_and_quarter_turn() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)];
        assert_eq!(apply(&RigidTransform::identity(), &pts), pts);
        let rz = RigidTransform::new(Rotation3::about_z(FRAC_PI_2), Vec3::zeros());
        let out = rz.apply(&[Vec3::x()]);
        assert!((out[0] - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_transform(&mut rng);
        let id = compose(&a, &a.inverse());
        assert!(id.rot.angle() < 1e-12 && id.trans.norm() < 1e-12);
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cases: Vec<Vec3> = (0..20)
            .map(|_| random_rotation(&mut rng).to_axis_angle())
            .collect();
        cases.push(Vec3::new(1e-9, -2e-9, 3e-10));
        cases.push(Vec3::zeros());
        let h = 1e-6;
        for v in cases {
            let jac = axis_angle_jacobian(&v);
            for i in 0..3 {
                let mut vp = v;
                vp[i] += h;
                let mut vm = v;
                vm[i] -= h;
                let fd = (axis_angle_to_rotation(&vp).matrix() - axis_angle_to_rotation(&vm).matrix())
                    / (2.0 * h);
                assert!((fd - jac[i]).abs().max() < 1e-7, "{v:?} {i}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
            (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        fn transform() -> impl Strategy<Value = RigidTransform> {
            (vec3(1.8), vec3(3.0))
                .prop_map(|(v, t)| RigidTransform::new(axis_angle_to_rotation(&v), t))
        }

        proptest! {
            #[test]
            fn axis_angle_round_trip(v in vec3(1.8)) {
                prop_assume!(v.norm() < PI - 1e-6);
                let back = rotation_to_axis_angle(&axis_angle_to_rotation(&v));
                prop_assert!((back - v).norm() < 1e-9);
            }

            #[test]
            fn projection_is_always_a_rotation(
                data in proptest::collection::vec(-2.0f64..2.0, 10),
                kind_index in 0usize..5,
            ) {
                let kind = RotationKind::ALL[kind_index];
                let repr = RotationRepr::from_slice(kind, &data[..kind.dim()]).unwrap();
                if let Ok(r) = project_to_rotation(&repr) {
                    assert_valid(&r);
                }
            }

            #[test]
            fn compose_is_associative(a in transform(), b in transform(), c in transform()) {
                let lhs = compose(&compose(&a, &b), &c);
                let rhs = compose(&a, &compose(&b, &c));
                prop_assert!((lhs.rot.matrix() - rhs.rot.matrix()).abs().max() < 1e-12);
                prop_assert!((lhs.trans - rhs.trans).abs().max() < 1e-12);
            }
        }
    }
}
