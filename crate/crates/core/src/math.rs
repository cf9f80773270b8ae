//! Small fixed-size vector/matrix types shared by every module.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::float::{real, Real};

/// A 3-vector in scene units.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self { x: v, y: v, z: v }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::splat(T::zero())
    }

    #[inline]
    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(real(v[0]), real(v[1]), real(v[2]))
    }

    #[inline]
    pub fn to_f64(self) -> [f64; 3] {
        [
            self.x.to_f64().unwrap(),
            self.y.to_f64().unwrap(),
            self.z.to_f64().unwrap(),
        ]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Self {
        self / self.norm()
    }

    #[inline]
    pub fn mul_elem(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn min_elem(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max_elem(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    #[inline]
    pub fn clamp01(self) -> Self {
        Self::new(
            self.x.max(T::zero()).min(T::one()),
            self.y.max(T::zero()).min(T::one()),
            self.z.max(T::zero()).min(T::one()),
        )
    }

    #[inline]
    pub fn axis(self, a: usize) -> T {
        match a {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    #[inline]
    pub fn set_axis(&mut self, a: usize, v: T) {
        match a {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }

    #[inline]
    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Cast each component through f64 into another scalar type.
    #[inline]
    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::from_f64(self.to_f64())
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 4x4 matrix; used for camera-to-world transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4<T> {
    pub m: [[T; 4]; 4],
}

impl<T: Real> Mat4<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self { m }
    }

    pub fn from_rows(m: [[T; 4]; 4]) -> Self {
        Self { m }
    }

    pub fn from_f64(rows: [[f64; 4]; 4]) -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = real(rows[i][j]);
            }
        }
        Self { m }
    }

    pub fn to_f64(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = self.m[i][j].to_f64().unwrap();
            }
        }
        out
    }

    /// Applies the rotation block only.
    #[inline]
    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// Applies the transpose of the rotation block (world-to-camera for an
    /// orthonormal rotation).
    #[inline]
    pub fn rotate_transpose(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    /// Rotation + translation applied to a point.
    #[inline]
    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotate(p) + self.translation()
    }

    #[inline]
    pub fn translation(&self) -> Vec3<T> {
        Vec3::new(self.m[0][3], self.m[1][3], self.m[2][3])
    }

    /// Max absolute deviation of R^T R from the identity.
    pub fn rotation_orthonormality_error(&self) -> T {
        let cols: [Vec3<T>; 3] = [
            Vec3::new(self.m[0][0], self.m[1][0], self.m[2][0]),
            Vec3::new(self.m[0][1], self.m[1][1], self.m[2][1]),
            Vec3::new(self.m[0][2], self.m[1][2], self.m[2][2]),
        ];
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { T::one() } else { T::zero() };
                err = err.max((cols[i].dot(cols[j]) - want).abs());
            }
        }
        err
    }
}
