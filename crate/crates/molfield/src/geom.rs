//! Small 3-vector helpers used throughout the crate.
//!
//! Coordinates are always in Angstrom.

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
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
pub fn norm2(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    norm2(a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    norm2(sub(a, b))
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
pub fn all_finite(a: Vec3) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Bounding sphere of a molecule's field domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: Vec3) -> bool {
        dist(p, self.center) <= self.radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_arithmetic() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, -2.0, 0.5];
        assert_eq!(add(a, b), [5.0, 0.0, 3.5]);
        assert_eq!(sub(a, b), [-3.0, 4.0, 2.5]);
        assert_eq!(scale(a, 2.0), [2.0, 4.0, 6.0]);
        assert!((norm([3.0, 4.0, 0.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_containment() {
        let s = Sphere { center: [1.0, 0.0, 0.0], radius: 2.0 };
        assert!(s.contains([2.5, 0.0, 0.0]));
        assert!(!s.contains([3.5, 0.0, 0.0]));
    }
}
