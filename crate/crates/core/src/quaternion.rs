//! Quaternion algebra and rotation by conjugation.
//!
//! Quaternions are stored scalar-first as `(w, x, y, z)` everywhere in this
//! crate, including every tensor layout and file format. A vector in R³ is
//! identified with the pure quaternion `0 + xi + yj + zk`; conjugating a
//! quaternion by a nonzero `r` rotates its vector part and leaves its scalar
//! part untouched.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitudes below this are treated as the zero quaternion by [`inverse`].
pub const INVERSE_EPSILON: f64 = 1e-30;

/// An element of the quaternion algebra, scalar part first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A Euclidean 3-vector, e.g. one accelerometer sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vector3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vector3 {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl Quaternion {
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    #[inline]
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// A real quaternion `s + 0i + 0j + 0k`.
    #[inline]
    pub const fn from_real(s: f64) -> Self {
        Self::new(s, 0.0, 0.0, 0.0)
    }

    #[inline]
    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    #[inline]
    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    #[inline]
    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    #[inline]
    pub fn write_to(self, out: &mut [f64]) {
        out[0] = self.w;
        out[1] = self.x;
        out[2] = self.y;
        out[3] = self.z;
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n == 0.0 {
            return Err(Error::Domain("rotation axis has zero length".into()));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self::new(c, s * axis.x / n, s * axis.y / n, s * axis.z / n))
    }

    #[inline]
    pub fn norm_sqr(self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Euclidean inner product on R⁴.
    #[inline]
    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Adds a real number to the scalar part.
    #[inline]
    pub fn add_real(self, s: f64) -> Self {
        Self::new(self.w + s, self.x, self.y, self.z)
    }

    pub fn inverse(self) -> Result<Self> {
        inverse(self)
    }

    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if n < INVERSE_EPSILON {
            return Err(Error::Domain("cannot normalize the zero quaternion".into()));
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn is_pure(self) -> bool {
        self.w == 0.0
    }

    pub fn vector(self) -> Vector3 {
        vector_part(self)
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Add for Quaternion {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Quaternion {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.w += o.w;
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Quaternion {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quaternion {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Mul for Quaternion {
    type Output = Self;
    #[inline]
    fn mul(self, q: Self) -> Self {
        hamilton_product(self, q)
    }
}

impl Mul<f64> for Quaternion {
    type Output = Self;
    #[inline]
    fn mul(self, s: f64) -> Self {
        self.scale(s)
    }
}

/// The Hamilton product `p·q`.
#[inline]
pub fn hamilton_product(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion::new(
        p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
        p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
        p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
        p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w,
    )
}

#[inline]
pub fn conjugate(q: Quaternion) -> Quaternion {
    q.conjugate()
}

/// `conjugate(q) / |q|²`. Fails below [`INVERSE_EPSILON`].
#[inline]
pub fn inverse(q: Quaternion) -> Result<Quaternion> {
    let n2 = q.norm_sqr();
    if n2.sqrt() < INVERSE_EPSILON {
        return Err(Error::Domain(format!("inverse of near-zero quaternion {q}")));
    }
    Ok(q.conjugate().scale(1.0 / n2))
}

/// `r·q·r⁻¹`: rotates the vector part of `q` about the vector part of `r` by
/// `2·acos(r.w / |r|)` and preserves its scalar part.
#[inline]
pub fn conjugation_rotate(r: Quaternion, q: Quaternion) -> Result<Quaternion> {
    Ok(r * q * inverse(r)?)
}

#[inline]
pub fn embed_pure(v: Vector3) -> Quaternion {
    Quaternion::new(0.0, v.x, v.y, v.z)
}

#[inline]
pub fn vector_part(q: Quaternion) -> Vector3 {
    Vector3::new(q.x, q.y, q.z)
}

/// Uniform sample on S³ (four standard normals, normalized). The induced
/// rotations are Haar-distributed on SO(3).
pub fn random_unit_quaternion<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    loop {
        let q = Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = q.norm();
        if n > 1e-12 {
            return q.scale(1.0 / n);
        }
    }
}

/// Rotates a 3-vector by the unit quaternion `r`.
pub fn rotate_vector(r: Quaternion, v: Vector3) -> Result<Vector3> {
    conjugation_rotate(r, embed_pure(v)).map(vector_part)
}
