//! Bezier curve evaluation and differentiation.
//!
//! Curves are parametrized by an ordered set of control points. Evaluation
//! uses De Casteljau's recurrence, which is numerically stable; the direct
//! Bernstein-basis sum is kept alongside it as an independent oracle. The
//! derivative comes from the hodograph: the degree-(n-1) curve of successive
//! control-point differences scaled by n.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{real, Real};
use crate::math::Vec3;

/// Largest supported control-point count.
pub const MAX_ORDER: usize = 16;

/// How a control polygon is pinned to the canonical frame at t = 0.
///
/// `SubtractFirst` removes the first point from all of them so the curve
/// starts at zero; `PinFirstZero` forces the first point itself to zero and
/// keeps the rest; `None` leaves the polygon untouched (the first frame may
/// then carry deformation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalMode {
    None,
    #[default]
    SubtractFirst,
    PinFirstZero,
}

/// An ordered set of control points defining one Bezier curve of degree
/// `order() - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPolygon<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Real> ControlPolygon<T> {
    /// Builds a polygon, requiring 2..=16 finite control points.
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPolygon(format!(
                "need at least 2 control points, got {}",
                points.len()
            )));
        }
        if points.len() > MAX_ORDER {
            return Err(Error::InvalidPolygon(format!(
                "at most {MAX_ORDER} control points supported, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidPolygon(format!(
                "control point {i} is not finite"
            )));
        }
        Ok(Self { points })
    }

    /// Number of control points O; the curve degree is O - 1.
    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    /// Evaluates the curve at `t` via De Casteljau's recurrence.
    ///
    /// `t` is clamped to [0, 1]; debug builds assert it was in range.
    pub fn de_casteljau(&self, t: T) -> Vec3<T> {
        de_casteljau(&self.points, t)
    }

    /// Evaluates the curve at `t` by the direct Bernstein-basis sum.
    ///
    /// Mathematically identical to [`Self::de_casteljau`]; kept as an
    /// independent evaluation route.
    pub fn bernstein_eval(&self, t: T) -> Vec3<T> {
        let t = clamp_time(t);
        let n = self.order() - 1;
        let mut acc = Vec3::zero();
        for (i, &p) in self.points.iter().enumerate() {
            acc += p * bernstein(n, i, t);
        }
        acc
    }

    /// Exact curve derivative at `t` (the hodograph evaluated at `t`).
    pub fn derivative(&self, t: T) -> Vec3<T> {
        let t = clamp_time(t);
        let n = self.order() - 1;
        let scale = real::<T>(n as f64);
        let mut acc = Vec3::zero();
        for i in 0..n {
            let diff = self.points[i + 1] - self.points[i];
            acc += diff * bernstein(n - 1, i, t);
        }
        acc * scale
    }

    /// Returns a copy of the polygon pinned to the canonical frame.
    pub fn canonicalize(&self, mode: CanonicalMode) -> ControlPolygon<T> {
        let mut points = self.points.clone();
        canonicalize_in_place(&mut points, mode);
        ControlPolygon { points }
    }
}

/// Stack-buffer De Casteljau evaluation over a slice of control points.
pub(crate) fn de_casteljau<T: Real>(points: &[Vec3<T>], t: T) -> Vec3<T> {
    debug_assert!(points.len() >= 2 && points.len() <= MAX_ORDER);
    let t = clamp_time(t);
    let s = T::one() - t;
    let mut buf = [Vec3::zero(); MAX_ORDER];
    let n = points.len();
    buf[..n].copy_from_slice(points);
    for level in (1..n).rev() {
        for i in 0..level {
            buf[i] = buf[i] * s + buf[i + 1] * t;
        }
    }
    buf[0]
}

pub(crate) fn canonicalize_in_place<T: Real>(points: &mut [Vec3<T>], mode: CanonicalMode) {
    match mode {
        CanonicalMode::None => {}
        CanonicalMode::SubtractFirst => {
            let first = points[0];
            for p in points.iter_mut() {
                *p = *p - first;
            }
        }
        CanonicalMode::PinFirstZero => {
            points[0] = Vec3::zero();
        }
    }
}

/// Bernstein basis weights B_{n,i}(t) for a curve with `order` control
/// points (degree order - 1), written into `out[..order]`.
pub fn bernstein_weights<T: Real>(order: usize, t: T, out: &mut [T]) {
    debug_assert!(order >= 1 && order <= MAX_ORDER && out.len() >= order);
    let n = order - 1;
    let t = clamp_time(t);
    for (i, w) in out.iter_mut().enumerate().take(order) {
        *w = bernstein(n, i, t);
    }
}

/// B_{n,i}(t) = C(n, i) (1-t)^(n-i) t^i.
fn bernstein<T: Real>(n: usize, i: usize, t: T) -> T {
    let c = real::<T>(binomial(n, i) as f64);
    c * (T::one() - t).powi((n - i) as i32) * t.powi(i as i32)
}

fn binomial(n: usize, k: usize) -> u64 {
    // Exact in u64 for the supported degrees (n <= 15).
    let k = k.min(n - k);
    let mut num = 1u64;
    for j in 0..k {
        num = num * (n - j) as u64 / (j + 1) as u64;
    }
    num
}

#[inline]
fn clamp_time<T: Real>(t: T) -> T {
    debug_assert!(
        t >= T::zero() && t <= T::one(),
        "curve parameter {t} outside [0, 1]"
    );
    t.max(T::zero()).min(T::one())
}
