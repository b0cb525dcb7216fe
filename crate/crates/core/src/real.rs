//! Scalar abstraction shared by every numeric module.
//!
//! All math in the crate is written against [`Real`], which is implemented for
//! `f32` and `f64`. Binary file formats are always stored as `f32` (or `f64`
//! for checkpoints) regardless of the in-memory scalar.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + LinalgScalar
        + ScalarOperand
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

/// Unit vector along `a`, or `None` for a zero (or non-finite) vector.
#[inline]
pub fn normalize<T: Real>(a: Vec3<T>) -> Option<Vec3<T>> {
    let n = norm(a);
    if n > T::zero() && n.is_finite() {
        Some(scale(a, T::one() / n))
    } else {
        None
    }
}

/// Adjoint of `x -> x / |x|`: maps the cotangent `g` of the unit vector back
/// onto `x`.
#[inline]
pub fn normalize_vjp<T: Real>(x: Vec3<T>, g: Vec3<T>) -> Vec3<T> {
    let n = norm(x);
    if n <= T::zero() {
        return [T::zero(); 3];
    }
    let u = scale(x, T::one() / n);
    scale(sub(g, scale(u, dot(u, g))), T::one() / n)
}

/// Row-major 3x3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

pub fn mat3_identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat3_mul_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
pub fn mat3_transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = *m;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_det<T: Real>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle<T: Real>(w: Vec3<T>) -> Mat3<T> {
    let theta = norm(w);
    if theta < lit(1e-300) {
        return mat3_identity();
    }
    let k = scale(w, T::one() / theta);
    let (s, c) = theta.sin_cos();
    let v = T::one() - c;
    [
        [
            c + k[0] * k[0] * v,
            k[0] * k[1] * v - k[2] * s,
            k[0] * k[2] * v + k[1] * s,
        ],
        [
            k[1] * k[0] * v + k[2] * s,
            c + k[1] * k[1] * v,
            k[1] * k[2] * v - k[0] * s,
        ],
        [
            k[2] * k[0] * v - k[1] * s,
            k[2] * k[1] * v + k[0] * s,
            c + k[2] * k[2] * v,
        ],
    ]
}

/// Rotation angle of a proper rotation matrix, in radians.
pub fn rotation_angle<T: Real>(r: &Mat3<T>) -> T {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let c = ((tr - T::one()) / lit(2.0)).max(-T::one()).min(T::one());
    // acos loses precision near zero; recover the small angle from the
    // skew-symmetric part instead.
    let s = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let sin = norm(s) / lit(2.0);
    sin.atan2(c)
}

pub fn cast_vec3<A: Real, B: Real>(v: Vec3<A>) -> Vec3<B> {
    [lit(to_f64(v[0])), lit(to_f64(v[1])), lit(to_f64(v[2]))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let x = [0.3_f64, -1.2, 0.7];
        let g = [0.5, 0.1, -0.4];
        let analytic = normalize_vjp(x, g);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fp = dot(normalize(xp).unwrap(), g);
            let fm = dot(normalize(xm).unwrap(), g);
            assert!((analytic[i] - (fp - fm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn rodrigues_is_orthonormal_and_recovers_angle() {
        let r = rotation_from_axis_angle([0.1_f64, -0.3, 0.2]);
        let rtr = mat3_mul(&mat3_transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-14);
            }
        }
        assert!((mat3_det(&r) - 1.0).abs() < 1e-14);
        let angle = (0.1_f64 * 0.1 + 0.09 + 0.04).sqrt();
        assert!((rotation_angle(&r) - angle).abs() < 1e-14);
    }
}
