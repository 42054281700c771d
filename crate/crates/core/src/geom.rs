//! Small fixed-size vector helpers on `[f64; 3]`.

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn triangle_area(p0: Vec3, p1: Vec3, p2: Vec3) -> f64 {
    0.5 * norm(cross(sub(p1, p0), sub(p2, p0)))
}

pub fn centroid(p0: Vec3, p1: Vec3, p2: Vec3) -> Vec3 {
    scale(add(add(p0, p1), p2), 1.0 / 3.0)
}

/// Cotangent of the angle between `a` and `b`.
#[inline]
pub fn cot(a: Vec3, b: Vec3) -> f64 {
    dot(a, b) / norm(cross(a, b))
}
