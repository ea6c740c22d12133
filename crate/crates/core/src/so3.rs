//! Rotation algebra: unit quaternions, rotation matrices, SLERP, piecewise
//! heading drift, geodesic distance and body-frame angular velocity.
//!
//! Quaternions are stored `(w, x, y, z)` and canonicalized to `w ≥ 0` when
//! they cross an I/O boundary. Rotation matrices are plain
//! [`nalgebra::Matrix3`] values; [`is_rotation`] checks the SO(3) invariants.
//!
//! The `*_g` functions are generic over [`Real`] so that the optimizer can
//! differentiate them with [`crate::dual::Dual`] numbers.

use crate::dual::{Real, M3};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RotationMatrix = Matrix3<f64>;
pub type AngularVelocity = Vector3<f64>;

/// Quaternions whose norm is within this of one are accepted as-is.
pub const UNIT_TOL: f64 = 1e-6;
/// Quaternions within this of unit norm are renormalized silently.
pub const RENORM_TOL: f64 = 1e-3;
/// Cosine threshold above which SLERP falls back to normalized lerp.
const NLERP_DOT: f64 = 1.0 - 5e-9;
/// Below this |dot| the shortest arc between two quaternions is ambiguous.
const AMBIGUOUS_DOT: f64 = 1e-9;
/// Symmetric part of `RᵀṘ` above this norm is reported as inconsistent.
pub const SKEW_WARN_TOL: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    #[error("quaternion norm {0} is not within {RENORM_TOL} of 1")]
    NotUnit(f64),
    #[error("quaternion has non-finite components")]
    NonFinite,
    #[error("interpolation parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("rotations are 180° apart; the shortest arc is undefined")]
    Antipodal,
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = So3Error;
    fn try_from(v: [f64; 4]) -> Result<Self, So3Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.canonical().to_array()
    }
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a unit quaternion, renormalizing small norm errors and rejecting
    /// anything further than [`RENORM_TOL`] from unit length.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        if ![w, x, y, z].iter().all(|v| v.is_finite()) {
            return Err(So3Error::NonFinite);
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() > RENORM_TOL {
            return Err(So3Error::NotUnit(n));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Normalizes any nonzero finite 4-vector.
    pub fn normalize(v: [f64; 4]) -> Result<Self, So3Error> {
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(So3Error::NonFinite);
        }
        Ok(Self {
            w: v[0] / n,
            x: v[1] / n,
            y: v[2] / n,
            z: v[3] / n,
        })
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    pub fn from_matrix(r: &RotationMatrix) -> Self {
        matrix_to_quat(r)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    /// Sign-flipped so that `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }

    /// Hamilton product `self ⊗ rhs` (rotation `self` applied after `rhs`).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

/// Rotation matrix of a unit quaternion. `q` and `-q` give the same matrix.
pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    let m = quat_to_matrix_g::<f64>(q.to_array());
    crate::dual::re33(&m)
}

/// Generic quaternion to matrix map; the input is normalized first so the
/// derivative accounts for the projection onto the unit sphere.
pub fn quat_to_matrix_g<S: Real>(q: [S; 4]) -> M3<S> {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    let s = S::cst(2.0) / n2;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = S::one();
    [
        [
            one - s * (y * y + z * z),
            s * (x * y - w * z),
            s * (x * z + w * y),
        ],
        [
            s * (x * y + w * z),
            one - s * (x * x + z * z),
            s * (y * z - w * x),
        ],
        [
            s * (x * z - w * y),
            s * (y * z + w * x),
            one - s * (x * x + y * y),
        ],
    ]
}

/// Shepperd's method; result canonicalized to `w ≥ 0`.
pub fn matrix_to_quat(r: &RotationMatrix) -> UnitQuaternion {
    let tr = r.trace();
    let (w, x, y, z);
    if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion::normalize([w, x, y, z])
        .expect("rotation matrix yields a finite quaternion")
        .canonical()
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q0: &UnitQuaternion, q1: &UnitQuaternion, u: f64) -> Result<UnitQuaternion, So3Error> {
    if !(0.0..=1.0).contains(&u) || u.is_nan() {
        return Err(So3Error::ParameterOutOfRange(u));
    }
    if q0.dot(q1).abs() < AMBIGUOUS_DOT {
        return Err(So3Error::Antipodal);
    }
    let r = slerp_g::<f64>(q0.to_array(), q1.to_array(), u);
    UnitQuaternion::normalize(r)
}

/// Generic SLERP on raw 4-vectors. Inputs are normalized; for nearly parallel
/// inputs the normalized linear interpolation is used.
pub fn slerp_g<S: Real>(q0: [S; 4], q1: [S; 4], u: f64) -> [S; 4] {
    let q0 = normalize4(q0);
    let mut q1 = normalize4(q1);
    let mut d = q0[0] * q1[0] + q0[1] * q1[1] + q0[2] * q1[2] + q0[3] * q1[3];
    if d.re() < 0.0 {
        for c in q1.iter_mut() {
            *c = -*c;
        }
        d = -d;
    }
    let (a, b) = if d.re() > NLERP_DOT {
        (S::cst(1.0 - u), S::cst(u))
    } else {
        let theta = d.acos();
        let s = theta.sin();
        ((theta * (1.0 - u)).sin() / s, (theta * u).sin() / s)
    };
    let mut out = [S::zero(); 4];
    for k in 0..4 {
        out[k] = q0[k] * a + q1[k] * b;
    }
    normalize4(out)
}

pub fn normalize4<S: Real>(q: [S; 4]) -> [S; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Segment index and local interpolation parameter for the 3-knot drift.
pub fn heading_segment(t: f64, duration: f64) -> (usize, f64) {
    let t = t.clamp(0.0, duration);
    let half = 0.5 * duration;
    if t <= half {
        (0, if half > 0.0 { t / half } else { 0.0 })
    } else {
        (1, ((t - half) / half).min(1.0))
    }
}

/// `R_nn'(t)`: piecewise SLERP between knots at `0`, `T/2` and `T`. Times
/// outside `[0, T]` are clamped.
pub fn piecewise_heading(
    q_start: &UnitQuaternion,
    q_mid: &UnitQuaternion,
    q_end: &UnitQuaternion,
    t: f64,
    duration: f64,
) -> RotationMatrix {
    let knots = [q_start.to_array(), q_mid.to_array(), q_end.to_array()];
    crate::dual::re33(&piecewise_heading_g::<f64>(&knots, t, duration))
}

/// Generic piecewise heading on raw knot 4-vectors.
pub fn piecewise_heading_g<S: Real>(knots: &[[S; 4]; 3], t: f64, duration: f64) -> M3<S> {
    let (seg, u) = heading_segment(t, duration);
    let q = if u == 0.0 {
        knots[seg]
    } else if u == 1.0 {
        knots[seg + 1]
    } else {
        slerp_g(knots[seg], knots[seg + 1], u)
    };
    quat_to_matrix_g(q)
}

/// Rotation angle of `Ra Rb⁻¹` in `[0, π]`.
///
/// Evaluated as `atan2(‖vee(asym)‖, (Tr − 1)/2)`, which equals the clamped
/// `arccos((Tr − 1)/2)` but keeps full precision near 0 and π.
pub fn geodesic_angle(ra: &RotationMatrix, rb: &RotationMatrix) -> f64 {
    let m = ra * rb.transpose();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = 0.5
        * Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Vector of the skew-symmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

pub fn vee_g<S: Real>(m: &M3<S>) -> [S; 3] {
    [
        (m[2][1] - m[1][2]) * 0.5,
        (m[0][2] - m[2][0]) * 0.5,
        (m[1][0] - m[0][1]) * 0.5,
    ]
}

/// Body-frame angular velocity with the consistency diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct AngularVelocityEstimate {
    pub omega: AngularVelocity,
    /// Frobenius norm of the symmetric part of `R⁻¹Ṙ`; zero when `Ṙ` is a
    /// true derivative of `R`.
    pub symmetric_residual: f64,
}

/// `ω = vee(R⁻¹Ṙ)`, skew-symmetrizing first.
pub fn angular_velocity(r: &RotationMatrix, rdot: &Matrix3<f64>) -> AngularVelocityEstimate {
    let m = r.transpose() * rdot;
    let sym = 0.5 * (m + m.transpose());
    let residual = sym.norm();
    if residual > SKEW_WARN_TOL {
        log::warn!("R⁻¹Ṙ has symmetric part of norm {residual:.3e}; Ṙ is inconsistent with R");
    }
    AngularVelocityEstimate {
        omega: vee(&m),
        symmetric_residual: residual,
    }
}

/// Rotation about a unit axis.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> RotationMatrix {
    exp_map(&(axis.normalize() * angle))
}

/// Rodrigues' formula.
pub fn exp_map(r: &Vector3<f64>) -> RotationMatrix {
    crate::dual::re33(&exp_map_g::<f64>([r.x, r.y, r.z]))
}

fn hat_g<S: Real>(r: &[S; 3]) -> M3<S> {
    let z = S::zero();
    [[z, -r[2], r[1]], [r[2], z, -r[0]], [-r[1], r[0], z]]
}

/// Returns `(sin θ/θ, (1 − cos θ)/θ², (θ − sin θ)/θ³)` from `θ²`, using series
/// expansions near zero so the derivatives stay finite.
fn rodrigues_coeffs<S: Real>(theta2: S) -> (S, S, S) {
    if theta2.re() < 1e-6 {
        let t2 = theta2;
        let t4 = t2 * t2;
        (
            S::one() - t2 / 6.0 + t4 / 120.0,
            S::cst(0.5) - t2 / 24.0 + t4 / 720.0,
            S::cst(1.0 / 6.0) - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let th = theta2.sqrt();
        let (s, c) = (th.sin(), th.cos());
        (s / th, (S::one() - c) / theta2, (th - s) / (theta2 * th))
    }
}

pub fn exp_map_g<S: Real>(r: [S; 3]) -> M3<S> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, _) = rodrigues_coeffs(theta2);
    let k = hat_g(&r);
    let k2 = crate::dual::matmul(&k, &k);
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { S::one() } else { S::zero() };
            out[i][j] = id + k[i][j] * a + k2[i][j] * b;
        }
    }
    out
}

/// Left Jacobian of SO(3): `d/dε exp(r + ε e_k) = [J_l(r) e_k]× exp(r)`.
pub fn left_jacobian_g<S: Real>(r: [S; 3]) -> M3<S> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (_, b, c) = rodrigues_coeffs(theta2);
    let k = hat_g(&r);
    let k2 = crate::dual::matmul(&k, &k);
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { S::one() } else { S::zero() };
            out[i][j] = id + k[i][j] * b + k2[i][j] * c;
        }
    }
    out
}

/// Exponential coordinates of a rotation (inverse of [`exp_map`]).
pub fn log_map(r: &RotationMatrix) -> Vector3<f64> {
    let q = matrix_to_quat(r);
    let v = Vector3::new(q.x, q.y, q.z);
    let s = v.norm();
    if s < 1e-12 {
        return 2.0 * v;
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

/// Checks `RᵀR = I` and `det R = +1` within `tol`.
pub fn is_rotation(r: &RotationMatrix, tol: f64) -> bool {
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Projects an arbitrary 3×3 matrix onto the nearest rotation (polar factor).
pub fn project_to_rotation(m: &Matrix3<f64>) -> RotationMatrix {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn z_rot(angle: f64) -> UnitQuaternion {
        UnitQuaternion::from_axis_angle(&Vector3::z(), angle)
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        assert_eq!(quat_to_matrix(&UnitQuaternion::IDENTITY), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = quat_to_matrix(&z_rot(FRAC_PI_2));
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn sign_of_quaternion_does_not_matter() {
        let q = UnitQuaternion::normalize([0.3, -0.4, 0.5, 0.2]).unwrap();
        assert!((quat_to_matrix(&q) - quat_to_matrix(&q.negated())).norm() < 1e-15);
    }

    #[test]
    fn norm_tolerance_rules() {
        assert!(UnitQuaternion::new(1.0 + 5e-4, 0.0, 0.0, 0.0).is_ok());
        assert!(matches!(
            UnitQuaternion::new(1.01, 0.0, 0.0, 0.0),
            Err(So3Error::NotUnit(_))
        ));
        let q = UnitQuaternion::new(1.0 + 5e-4, 0.0, 0.0, 0.0).unwrap();
        assert!((q.norm() - 1.0).abs() < 1e-15);
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let q0 = UnitQuaternion::IDENTITY;
        let q1 = z_rot(FRAC_PI_2);
        assert!((slerp(&q0, &q1, 0.0).unwrap().dot(&q0) - 1.0).abs() < 1e-15);
        assert!((slerp(&q0, &q1, 1.0).unwrap().dot(&q1) - 1.0).abs() < 1e-15);
        let mid = slerp(&q0, &q1, 0.5).unwrap();
        assert!((mid.dot(&z_rot(FRAC_PI_4)).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let q0 = UnitQuaternion::IDENTITY;
        let q1 = z_rot(FRAC_PI_2).negated();
        let mid = slerp(&q0, &q1, 0.5).unwrap();
        let angle = geodesic_angle(&quat_to_matrix(&mid), &Matrix3::identity());
        assert!((angle - FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn slerp_rejects_ambiguous_and_out_of_range() {
        let q0 = UnitQuaternion::IDENTITY;
        let q1 = UnitQuaternion::from_axis_angle(&Vector3::x(), PI);
        assert_eq!(slerp(&q0, &q1, 0.5), Err(So3Error::Antipodal));
        assert!(matches!(
            slerp(&q0, &q0, 1.5),
            Err(So3Error::ParameterOutOfRange(_))
        ));
    }

    #[test]
    fn near_parallel_slerp_matches_exact_angle_formula() {
        // Oracle: for rotations about a common axis the interpolant is the
        // rotation by u·Δ, which has a closed form independent of slerp.
        let delta = 3e-5;
        let q0 = z_rot(0.2);
        let q1 = z_rot(0.2 + delta);
        for &u in &[0.1, 0.37, 0.5, 0.9] {
            let got = slerp(&q0, &q1, u).unwrap();
            let want = z_rot(0.2 + u * delta);
            let diff: f64 = got
                .to_array()
                .iter()
                .zip(want.to_array())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "u={u} diff={diff}");
        }
    }

    #[test]
    fn piecewise_heading_knots_and_quarter_point() {
        let id = UnitQuaternion::IDENTITY;
        let ten = z_rot(10f64.to_radians());
        let total = 8.0;
        let r = piecewise_heading(&id, &ten, &id, total / 4.0, total);
        let angle = geodesic_angle(&r, &Matrix3::identity());
        assert!((angle - 5f64.to_radians()).abs() < 1e-12);
        let mid = piecewise_heading(&id, &ten, &id, total / 2.0, total);
        assert_eq!(mid, quat_to_matrix(&ten));
        let clamped = piecewise_heading(&ten, &id, &id, -0.3, total);
        assert_eq!(clamped, quat_to_matrix(&ten));
        for t in [0.0, 1.0, 5.0, 8.0] {
            assert_eq!(piecewise_heading(&id, &id, &id, t, total), Matrix3::identity());
        }
    }

    #[test]
    fn geodesic_examples() {
        let i = Matrix3::identity();
        assert_eq!(geodesic_angle(&i, &i), 0.0);
        let r = axis_angle(&Vector3::new(0.3, -1.0, 2.0), 30f64.to_radians());
        assert!((geodesic_angle(&i, &r) - std::f64::consts::FRAC_PI_6).abs() < 1e-12);
        let flip = axis_angle(&Vector3::x(), PI);
        assert!((geodesic_angle(&i, &flip) - PI).abs() < 1e-12);
    }

    #[test]
    fn constant_rate_about_z() {
        let w0 = 1.7;
        let t = 0.4;
        let r = axis_angle(&Vector3::z(), w0 * t);
        let rdot = hat(&Vector3::new(0.0, 0.0, w0)) * r;
        let est = angular_velocity(&r, &rdot);
        assert!((est.omega - Vector3::new(0.0, 0.0, w0)).norm() < 1e-14);
        assert!(est.symmetric_residual < 1e-14);
        let zero = angular_velocity(&r, &Matrix3::zeros());
        assert_eq!(zero.omega, Vector3::zeros());
    }

    #[test]
    fn inconsistent_rate_reports_symmetric_residual() {
        let est = angular_velocity(&Matrix3::identity(), &Matrix3::identity());
        assert!(est.symmetric_residual > SKEW_WARN_TOL);
    }

    #[test]
    fn log_inverts_exp() {
        let v = Vector3::new(0.4, -1.1, 0.9);
        assert!((log_map(&exp_map(&v)) - v).norm() < 1e-12);
        assert!(log_map(&Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn left_jacobian_matches_finite_difference() {
        let r = [0.3, -0.5, 0.8];
        let jl = crate::dual::re33(&left_jacobian_g::<f64>(r));
        let r0 = exp_map(&Vector3::from(r));
        let h = 1e-6;
        for k in 0..3 {
            let mut rp = r;
            let mut rm = r;
            rp[k] += h;
            rm[k] -= h;
            let d = (exp_map(&Vector3::from(rp)) - exp_map(&Vector3::from(rm))) / (2.0 * h);
            let w = vee(&(d * r0.transpose()));
            assert!((w - jl.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn serde_canonicalizes_sign() {
        let q = z_rot(0.5).negated();
        let json = serde_json::to_string(&q).unwrap();
        let back: UnitQuaternion = serde_json::from_str(&json).unwrap();
        assert!(back.w() >= 0.0);
        assert!((back.dot(&q).abs() - 1.0).abs() < 1e-15);
    }
}
