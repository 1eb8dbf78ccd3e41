//! Rigid-body transforms in SE(3) stored as a unit quaternion plus translation.
//!
//! Twists are ordered `(rho, omega)`: translational part first, rotational
//! part second. The exponential and logarithm maps are closed-form (Rodrigues
//! with the SE(3) `V` matrix) and switch to second-order Taylor expansions
//! below [`SMALL_ANGLE`].

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotation angle below which exp/log use Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// The log map refuses rotations whose angle is within this margin of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Parsed quaternions closer than this to unit norm are kept verbatim, so that
/// canonical 9-digit trajectory lines survive a parse/serialize round trip.
const PARSE_UNIT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LieError {
    #[error("rotation angle {angle} is within {NEAR_PI_MARGIN} of pi; log map is not unique")]
    AngleNearPi { angle: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TumError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Skew-symmetric cross-product matrix.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion `(w, x, y, z)` with the canonical sign `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawQuaternion", into = "RawQuaternion")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
struct RawQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl From<RawQuaternion> for Rotation {
    fn from(q: RawQuaternion) -> Self {
        Rotation::from_wxyz(q.w, q.x, q.y, q.z)
    }
}

impl From<Rotation> for RawQuaternion {
    fn from(r: Rotation) -> Self {
        RawQuaternion { w: r.w, x: r.x, y: r.y, z: r.z }
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and canonicalizes the sign. A zero quaternion maps to identity.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Rotation { w: -w, x: -x, y: -y, z: -z }
        } else {
            Rotation { w, x, y, z }
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let omega = axis * (angle / n);
        Pose::exp(&Twist::new(Vector3::zeros(), omega)).rotation
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn inverse(&self) -> Self {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        let (w1, v1) = (self.w, self.vec());
        let (w2, v2) = (other.w, other.vec());
        let w = w1 * w2 - v1.dot(&v2);
        let v = v2 * w1 + v1 * w2 + v1.cross(&v2);
        Rotation::from_wxyz(w, v.x, v.y, v.z)
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vec();
        let uv = u.cross(p);
        p + uv * (2.0 * self.w) + u.cross(&uv) * 2.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
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

    /// Builds a rotation from a (numerically) orthonormal matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let q = nalgebra::UnitQuaternion::from_matrix(m);
        Rotation::from_wxyz(q.w, q.i, q.j, q.k)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vec().norm().atan2(self.w)
    }

    /// Rotation vector (axis times angle).
    pub fn log(&self) -> Vector3<f64> {
        let v = self.vec();
        let s = v.norm();
        let w = self.w;
        let factor = if s < 0.5 * SMALL_ANGLE {
            // theta / s = 2 atan(s / w) / s, expanded to second order in s.
            2.0 / w - (2.0 / 3.0) * s * s / (w * w * w)
        } else {
            2.0 * s.atan2(w) / s
        };
        v * factor
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Element of se(3): translational part `rho`, rotational part `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Twist { rho, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            omega: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.omega.x, self.omega.y, self.omega.z,
        )
    }

    /// Euclidean norm of the stacked 6-vector (meters and radians in quadrature).
    pub fn norm(&self) -> f64 {
        twist_norm(self)
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist::new(self.rho * s, self.omega * s)
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, o: Twist) -> Twist {
        Twist::new(self.rho + o.rho, self.omega + o.omega)
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, o: Twist) -> Twist {
        Twist::new(self.rho - o.rho, self.omega - o.omega)
    }
}

pub fn twist_norm(xi: &Twist) -> f64 {
    (xi.rho.norm_squared() + xi.omega.norm_squared()).sqrt()
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new(Rotation::IDENTITY, Vector3::new(x, y, z))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose { rotation: r_inv, translation: -r_inv.rotate(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self^-1 * other`, the motion taking this frame to `other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Adjoint in `(rho, omega)` ordering: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let tr = hat(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    pub fn exp(xi: &Twist) -> Pose {
        exp_se3(xi)
    }

    pub fn log(&self) -> Result<Twist, LieError> {
        log_se3(self)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let theta2 = xi.omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(&xi.omega);
    let w2 = w * w;

    let (qw, qv_scale, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let half = 0.5 * theta;
        let (s, co) = half.sin_cos();
        (co, s / theta, 2.0 * s * s / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let qv = xi.omega * qv_scale;
    let rotation = Rotation::from_wxyz(qw, qv.x, qv.y, qv.z);
    let v = Matrix3::identity() + w * b + w2 * c;
    Pose { rotation, translation: v * xi.rho }
}

pub fn log_se3(p: &Pose) -> Result<Twist, LieError> {
    let theta = p.rotation.angle();
    if theta > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle: theta });
    }
    let omega = p.rotation.log();
    let w = hat(&omega);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * d;
    Ok(Twist { rho: v_inv * p.translation, omega })
}

/// Formats a float with 9 significant digits, trimming trailing zeros.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".to_string() } else { x.to_string() };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s)
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" { "0".to_string() } else { t.to_string() }
    } else {
        s.to_string()
    }
}

/// Parses one `timestamp tx ty tz qx qy qz qw` line. `line_no` is 1-based and
/// only used for diagnostics.
pub fn pose_from_quaternion_line(line: &str, line_no: usize) -> Result<(f64, Pose), TumError> {
    let bad = |reason: String| TumError::MalformedLine { line: line_no, reason };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(bad(format!("expected 8 fields, found {}", fields.len())));
    }
    let mut v = [0.0f64; 8];
    for (slot, tok) in v.iter_mut().zip(&fields) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(format!("non-numeric token '{tok}'")))?;
    }
    let [t, tx, ty, tz, qx, qy, qz, qw] = v;
    let n = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
    if (n - 1.0).abs() > 1e-3 {
        return Err(bad(format!("quaternion norm {n} is not within 1e-3 of 1")));
    }
    let rotation = if (n - 1.0).abs() <= PARSE_UNIT_TOLERANCE {
        Rotation::canonical(qw, qx, qy, qz)
    } else {
        Rotation::from_wxyz(qw, qx, qy, qz)
    };
    Ok((t, Pose::new(rotation, Vector3::new(tx, ty, tz))))
}

/// Serializes a pose as a canonical TUM line (no trailing newline).
pub fn pose_to_quaternion_line(t: f64, p: &Pose) -> String {
    let [qw, qx, qy, qz] = p.rotation.wxyz();
    let tr = p.translation;
    [t, tr.x, tr.y, tr.z, qx, qy, qz, qw]
        .iter()
        .map(|&x| format_sig9(x))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses a whole TUM trajectory. `#` comments and blank lines are skipped;
/// timestamps must be strictly increasing.
pub fn parse_tum(text: &str) -> Result<Vec<(f64, Pose)>, TumError> {
    let mut out: Vec<(f64, Pose)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, p) = pose_from_quaternion_line(line, idx + 1)?;
        if let Some((prev, _)) = out.last() {
            if t <= *prev {
                return Err(TumError::MalformedLine {
                    line: idx + 1,
                    reason: format!("timestamp {t} does not increase past {prev}"),
                });
            }
        }
        out.push((t, p));
    }
    Ok(out)
}

pub fn write_tum(entries: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in entries {
        s.push_str(&pose_to_quaternion_line(*t, p));
        s.push('\n');
    }
    s
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.rotation.wxyz();
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) q=({:.4}, {:.4}, {:.4}, {:.4})",
            self.translation.x, self.translation.y, self.translation.z, w, x, y, z
        )
    }
}
