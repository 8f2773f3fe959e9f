//! Small fixed-size linear algebra used throughout: 3-vectors, 3x3 matrices,
//! rigid transforms and axis-aligned boxes. Everything is `f64`.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Unit vector in the same direction; zero vectors are returned unchanged.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn min_by_component(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_by_component(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        vec3(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 {
            rows: [r0.to_array(), r1.to_array(), r2.to_array()],
        }
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.rows[i])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        vec3(self.rows[0][j], self.rows[1][j], self.rows[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        Mat3::from_rows(self.col(0), self.col(1), self.col(2))
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        vec3(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut rows = [[0.0; 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.row(i).dot(o.col(j));
            }
        }
        Mat3 { rows }
    }

    pub fn scale(sx: f64, sy: f64, sz: f64) -> Mat3 {
        Mat3 {
            rows: [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]],
        }
    }

    /// Rotation about an arbitrary axis (Rodrigues); the axis is normalized.
    pub fn rotation(axis: Vec3, angle: f64) -> Mat3 {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3 {
            rows: [
                [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
                [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
                [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
            ],
        }
    }

    pub fn rotation_y(angle: f64) -> Mat3 {
        Mat3::rotation(vec3(0.0, 1.0, 0.0), angle)
    }

    pub fn determinant(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Inverse via the adjugate; intended for well-conditioned deformation
    /// matrices, not general numerics.
    pub fn inverse(&self) -> Mat3 {
        let det = self.determinant();
        let c0 = self.row(1).cross(self.row(2));
        let c1 = self.row(2).cross(self.row(0));
        let c2 = self.row(0).cross(self.row(1));
        Mat3 {
            rows: [
                [c0.x / det, c1.x / det, c2.x / det],
                [c0.y / det, c1.y / det, c2.y / det],
                [c0.z / det, c1.z / det, c2.z / det],
            ],
        }
    }

    /// Max deviation of R^T R from the identity; 0 for exact rotations.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram.rows[i][j] - target).abs());
            }
        }
        err
    }
}

/// Invertible affine map `x -> linear * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        linear: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(linear: Mat3, translation: Vec3) -> Affine {
        Affine { linear, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.linear.mul_vec(p) + self.translation
    }

    pub fn apply_dir(&self, v: Vec3) -> Vec3 {
        self.linear.mul_vec(v)
    }

    pub fn inverse(&self) -> Affine {
        let inv = self.linear.inverse();
        Affine {
            linear: inv,
            translation: -inv.mul_vec(self.translation),
        }
    }

    pub fn compose(&self, inner: &Affine) -> Affine {
        Affine {
            linear: self.linear.mul_mat(&inner.linear),
            translation: self.linear.mul_vec(inner.translation) + self.translation,
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: vec3(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    pub fn from_points<I: IntoIterator<Item = Vec3>>(points: I) -> Aabb {
        let mut b = Aabb::EMPTY;
        for p in points {
            b.expand(p);
        }
        b
    }

    pub fn expand(&mut self, p: Vec3) {
        self.min = self.min.min_by_component(p);
        self.max = self.max.max_by_component(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min_by_component(o.min),
            max: self.max.max_by_component(o.max),
        }
    }

    pub fn dilated(&self, margin: f64) -> Aabb {
        let m = vec3(margin, margin, margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Squared distance from a point to the box (0 inside).
    pub fn distance_sq(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = p.get(a);
            let lo = self.min.get(a);
            let hi = self.max.get(a);
            let excess = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d += excess * excess;
        }
        d
    }

    /// Slab-method interval of a ray `o + t d` against the box, intersected
    /// with `[t_min, t_max]`. Returns `None` when the ray misses.
    pub fn ray_interval(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut lo = t_min;
        let mut hi = t_max;
        for a in 0..3 {
            let o = origin.get(a);
            let d = dir.get(a);
            let (mn, mx) = (self.min.get(a), self.max.get(a));
            if d.abs() < 1e-300 {
                if o < mn || o > mx {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut t0, mut t1) = ((mn - o) * inv, (mx - o) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_follows_right_hand_rule() {
        let c = vec3(1.0, 0.0, 0.0).cross(vec3(0.0, 1.0, 0.0));
        assert_eq!(c, vec3(0.0, 0.0, 1.0));
    }

    #[test]
    fn rotation_is_orthonormal_and_invertible() {
        let r = Mat3::rotation(vec3(0.3, -0.5, 0.81), 1.234);
        assert!(r.orthonormality_error() < 1e-12);
        let p = vec3(0.2, -1.3, 4.0);
        let back = r.inverse().mul_vec(r.mul_vec(p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine::new(
            Mat3::rotation_y(0.7).mul_mat(&Mat3::scale(1.0, 1.3, 0.9)),
            vec3(0.1, -2.0, 0.5),
        );
        let p = vec3(1.0, 2.0, 3.0);
        let q = a.inverse().apply(a.apply(p));
        assert!((q - p).norm() < 1e-12);
    }

    #[test]
    fn aabb_ray_interval_matches_chord() {
        let b = Aabb {
            min: vec3(-1.0, -1.0, -1.0),
            max: vec3(1.0, 1.0, 1.0),
        };
        let (t0, t1) = b
            .ray_interval(vec3(-5.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0), 0.0, 100.0)
            .unwrap();
        assert!((t0 - 4.0).abs() < 1e-12);
        assert!((t1 - 6.0).abs() < 1e-12);
        assert!(b
            .ray_interval(vec3(-5.0, 3.0, 0.0), vec3(1.0, 0.0, 0.0), 0.0, 100.0)
            .is_none());
    }

    #[test]
    fn aabb_distance_sq_inside_and_outside() {
        let b = Aabb {
            min: vec3(0.0, 0.0, 0.0),
            max: vec3(1.0, 1.0, 1.0),
        };
        assert_eq!(b.distance_sq(vec3(0.5, 0.5, 0.5)), 0.0);
        assert!((b.distance_sq(vec3(2.0, 0.5, 0.5)) - 1.0).abs() < 1e-15);
    }
}
