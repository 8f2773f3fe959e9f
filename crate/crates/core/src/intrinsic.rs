//! Mesh-intrinsic coordinates: map a Euclidean sample point to the UV-D or
//! XYZ-D coordinate of its nearest proxy-surface point, and apply learned
//! offsets inside the unit cube.

use crate::geom::{Aabb, Vec3};
use crate::mesh::ProxySequence;
use crate::spatial::{self, Bvh, SignedDistance, SurfacePoint};
use serde::{Deserialize, Serialize};

/// A point in the intrinsic grid: `(u, v, s)` for UV-D, `(x, y, z, s)` for
/// XYZ-D, all components in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicCoord {
    values: [f64; 4],
    dim: usize,
}

impl IntrinsicCoord {
    pub fn uvd(u: f64, v: f64, s: f64) -> IntrinsicCoord {
        IntrinsicCoord {
            values: [u, v, s, 0.0],
            dim: 3,
        }
    }

    pub fn xyzd(x: f64, y: f64, z: f64, s: f64) -> IntrinsicCoord {
        IntrinsicCoord {
            values: [x, y, z, s],
            dim: 4,
        }
    }

    pub fn from_slice(vals: &[f64]) -> IntrinsicCoord {
        assert!(vals.len() == 3 || vals.len() == 4);
        let mut values = [0.0; 4];
        values[..vals.len()].copy_from_slice(vals);
        IntrinsicCoord {
            values,
            dim: vals.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.dim]
    }
}

/// Sigmoid squashing of signed distances onto (0,1), `s = 1/(1+exp(-k d))`.
/// Steepness `k` has units of inverse scene length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSquash {
    pub k: f64,
}

impl DistanceSquash {
    pub fn new(k: f64) -> DistanceSquash {
        assert!(k > 0.0, "squash steepness must be positive");
        DistanceSquash { k }
    }

    /// Default steepness for a scene: the responsive band of the sigmoid
    /// spans roughly half a bounding-box diagonal on either side.
    pub fn for_diagonal(diagonal: f64) -> DistanceSquash {
        DistanceSquash::new(8.0 / diagonal)
    }

    /// Evaluated so that `squash(-d) == 1 - squash(d)` holds bitwise: the
    /// branch for negative `d` returns literally `1 - q` where `q` is the
    /// value the positive branch returns, so both sides of the identity are
    /// the same floating-point expression.
    pub fn squash(&self, d: f64) -> f64 {
        let t = (-(self.k * d).abs()).exp();
        let q = 1.0 - t / (1.0 + t);
        if d >= 0.0 {
            q
        } else {
            1.0 - q
        }
    }

    /// d(squash)/dd, for completeness in gradient checks.
    pub fn derivative(&self, d: f64) -> f64 {
        let s = self.squash(d);
        self.k * s * (1.0 - s)
    }
}

/// Per-axis linear normalization over the padded template bounding box,
/// mapping box_min -> 0 and box_max -> 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateNormalizer {
    pub box_min: Vec3,
    pub box_max: Vec3,
}

pub const TEMPLATE_BOX_PADDING: f64 = 0.10;

impl TemplateNormalizer {
    pub fn new(box_min: Vec3, box_max: Vec3) -> TemplateNormalizer {
        assert!(
            box_min.x < box_max.x && box_min.y < box_max.y && box_min.z < box_max.z,
            "normalizer box must have positive extent"
        );
        TemplateNormalizer { box_min, box_max }
    }

    /// Box of the template surface padded by 10% of each extent, so
    /// near-surface exterior points still normalize into [0,1]^3.
    pub fn for_template_bounds(bounds: &Aabb) -> TemplateNormalizer {
        let ext = bounds.extent();
        let pad = Vec3 {
            x: ext.x * TEMPLATE_BOX_PADDING,
            y: ext.y * TEMPLATE_BOX_PADDING,
            z: ext.z * TEMPLATE_BOX_PADDING,
        };
        TemplateNormalizer::new(bounds.min - pad, bounds.max + pad)
    }

    pub fn normalize(&self, p: Vec3) -> [f64; 3] {
        let ext = self.box_max - self.box_min;
        [
            ((p.x - self.box_min.x) / ext.x).clamp(0.0, 1.0),
            ((p.y - self.box_min.y) / ext.y).clamp(0.0, 1.0),
            ((p.z - self.box_min.z) / ext.z).clamp(0.0, 1.0),
        ]
    }
}

/// A proxy sequence with per-frame acceleration structures, built once and
/// shared read-only across query threads.
#[derive(Debug, Clone)]
pub struct SequenceQueries {
    pub seq: ProxySequence,
    pub bvhs: Vec<Bvh>,
}

impl SequenceQueries {
    pub fn new(seq: ProxySequence) -> SequenceQueries {
        let bvhs = seq.frames.iter().map(spatial::build_bvh).collect();
        SequenceQueries { seq, bvhs }
    }

    pub fn frame(&self, t: usize) -> (&crate::mesh::TriangleMesh, &Bvh) {
        (&self.seq.frames[t], &self.bvhs[t])
    }

    pub fn template(&self) -> (&crate::mesh::TriangleMesh, &Bvh) {
        self.frame(self.seq.template_index)
    }
}

/// Full result of an intrinsic query; the signed distance and surface point
/// are byproducts the caller usually needs too.
#[derive(Debug, Clone, Copy)]
pub struct IntrinsicSample {
    pub coord: IntrinsicCoord,
    pub signed_distance: f64,
    pub surface: SurfacePoint,
}

/// UV-D mapping: the nearest surface point's interpolated UV plus the
/// squashed signed distance.
pub fn uv_d(x: Vec3, t: usize, queries: &SequenceQueries, squash: &DistanceSquash) -> IntrinsicCoord {
    uv_d_sample(x, t, queries, squash).coord
}

pub fn uv_d_sample(
    x: Vec3,
    t: usize,
    queries: &SequenceQueries,
    squash: &DistanceSquash,
) -> IntrinsicSample {
    let (mesh, bvh) = queries.frame(t);
    let sp = spatial::closest_point(x, mesh, bvh);
    let d = spatial::signed_distance_at(x, &sp, mesh, bvh);
    let uv = spatial::surface_uv(&sp, mesh);
    IntrinsicSample {
        coord: IntrinsicCoord::uvd(
            uv[0].clamp(0.0, 1.0),
            uv[1].clamp(0.0, 1.0),
            squash.squash(d.value),
        ),
        signed_distance: d.value,
        surface: sp,
    }
}

/// XYZ-D mapping: the nearest point transferred to the template surface by
/// consistent barycentric weights, normalized per axis, plus the squashed
/// signed distance.
pub fn xyz_d(
    x: Vec3,
    t: usize,
    queries: &SequenceQueries,
    normalizer: &TemplateNormalizer,
    squash: &DistanceSquash,
) -> IntrinsicCoord {
    xyz_d_sample(x, t, queries, normalizer, squash).coord
}

pub fn xyz_d_sample(
    x: Vec3,
    t: usize,
    queries: &SequenceQueries,
    normalizer: &TemplateNormalizer,
    squash: &DistanceSquash,
) -> IntrinsicSample {
    let (mesh, bvh) = queries.frame(t);
    let sp = spatial::closest_point(x, mesh, bvh);
    let d = spatial::signed_distance_at(x, &sp, mesh, bvh);
    let template = queries.seq.template();
    let transferred = spatial::transfer_point(&sp, template)
        .expect("sequence frames share topology");
    let n = normalizer.normalize(transferred);
    IntrinsicSample {
        coord: IntrinsicCoord::xyzd(n[0], n[1], n[2], squash.squash(d.value)),
        signed_distance: d.value,
        surface: sp,
    }
}

/// Componentwise `r + delta`, clamped to the unit cube. Clamping keeps
/// gradients zero outside the box, preventing runaway offsets.
pub fn apply_offset(r: &IntrinsicCoord, delta: &[f64]) -> IntrinsicCoord {
    assert_eq!(r.dim(), delta.len(), "offset dimensionality mismatch");
    let mut values = [0.0; 4];
    for (i, (rv, dv)) in r.as_slice().iter().zip(delta).enumerate() {
        values[i] = (rv + dv).clamp(0.0, 1.0);
    }
    IntrinsicCoord {
        values,
        dim: r.dim(),
    }
}

/// Signed distance type re-export point for callers thinking in intrinsic
/// terms.
pub use crate::spatial::SignedDistance as Signed;

pub fn squash(d: SignedDistance, squash: &DistanceSquash) -> f64 {
    squash.squash(d.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{vec3, Mat3};
    use crate::mesh::{validate_sequence, TriangleMesh};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squash_midpoint_and_closed_form() {
        let s = DistanceSquash::new(10.0);
        assert_eq!(s.squash(0.0), 0.5);
        // 1/(1+e^-1), evaluated in closed form.
        let expected = 1.0 / (1.0 + (-1.0_f64).exp());
        assert!((s.squash(0.1) - expected).abs() < 1e-15);
        assert!((s.squash(0.1) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn squash_is_monotone_and_saturates() {
        let s = DistanceSquash::new(4.0);
        // Strict monotonicity where the sigmoid is representably away from
        // its asymptotes (|kd| <= 24 here).
        let mut prev = s.squash(-6.1);
        for i in -60..=60 {
            let v = s.squash(i as f64 * 0.1);
            assert!(v > prev);
            prev = v;
        }
        assert!(s.squash(1e6) <= 1.0 && s.squash(1e6) > 0.999999);
        assert!(s.squash(-1e6) >= 0.0 && s.squash(-1e6) < 1e-6);
    }

    #[test]
    fn squash_mirror_symmetry_is_bitwise() {
        let s = DistanceSquash::new(3.7);
        for i in 0..1000 {
            let d = (i as f64 - 500.0) * 0.013;
            assert_eq!(s.squash(-d), 1.0 - s.squash(d), "at d={d}");
        }
    }

    fn sphere_mesh(rings: usize, segments: usize, radius: f64) -> TriangleMesh {
        crate::synth::uv_sphere(rings, segments, radius)
    }

    #[test]
    fn uv_d_on_surface_has_half_s() {
        let m = sphere_mesh(8, 16, 1.0);
        let seq = validate_sequence(vec![m]).unwrap();
        let q = SequenceQueries::new(seq);
        let squash = DistanceSquash::for_diagonal(q.seq.template().bounds().diagonal());
        // A point slightly outside along +x maps near (u, v) of +x with s>0.5.
        let c = uv_d(vec3(1.2, 0.0, 0.0), 0, &q, &squash);
        assert_eq!(c.dim(), 3);
        assert!(c.as_slice()[2] > 0.5);
        // On a vertex of the mesh, s = 0.5 exactly.
        let v = q.seq.template().vertices[5];
        let c = uv_d(v, 0, &q, &squash);
        assert_eq!(c.as_slice()[2], 0.5);
        for &x in c.as_slice() {
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn uv_d_saturates_far_outside() {
        let m = sphere_mesh(8, 16, 1.0);
        let seq = validate_sequence(vec![m]).unwrap();
        let q = SequenceQueries::new(seq);
        let squash = DistanceSquash::new(10.0);
        let c = uv_d(vec3(3.0, 0.0, 0.0), 0, &q, &squash); // k*d = 20
        assert!(c.as_slice()[2] > 0.9999999);
    }

    #[test]
    fn rigid_correspondence_maps_to_same_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = sphere_mesh(8, 16, 1.0);
        let rot = Mat3::rotation(vec3(0.2, 1.0, 0.4), 0.9);
        let tau = vec3(0.3, -0.2, 0.8);
        let moved = base.transformed(|p| rot.mul_vec(p) + tau);
        let seq = validate_sequence(vec![base, moved]).unwrap();
        let q = SequenceQueries::new(seq);
        let squash = DistanceSquash::for_diagonal(q.seq.template().bounds().diagonal());
        for _ in 0..1000 {
            // Near-surface sample around the template sphere.
            let dir = vec3(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized();
            if dir.norm() == 0.0 {
                continue;
            }
            let x = dir * rng.random_range(0.8..1.2);
            let moved_x = rot.mul_vec(x) + tau;
            let a = uv_d(x, 0, &q, &squash);
            let b = uv_d(moved_x, 1, &q, &squash);
            for (va, vb) in a.as_slice().iter().zip(b.as_slice()) {
                assert!(
                    (va - vb).abs() < 1e-6,
                    "correspondence drift: {:?} vs {:?}",
                    a.as_slice(),
                    b.as_slice()
                );
            }
        }
    }

    #[test]
    fn xyz_d_template_and_endpoints() {
        let m = sphere_mesh(8, 16, 1.0);
        let seq = validate_sequence(vec![m]).unwrap();
        let q = SequenceQueries::new(seq);
        let bounds = q.seq.template().bounds();
        let norm = TemplateNormalizer::for_template_bounds(&bounds);
        let squash = DistanceSquash::for_diagonal(bounds.diagonal());

        // On the template frame, the transferred point is the nearest point
        // itself.
        let x = vec3(1.1, 0.0, 0.0);
        let c = xyz_d(x, 0, &q, &norm, &squash);
        let sample = uv_d_sample(x, 0, &q, &squash);
        let expected = norm.normalize(sample.surface.position);
        assert_eq!(c.dim(), 4);
        for k in 0..3 {
            assert!((c.as_slice()[k] - expected[k]).abs() < 1e-12);
        }

        // Normalization endpoints.
        assert_eq!(norm.normalize(norm.box_min), [0.0, 0.0, 0.0]);
        assert_eq!(norm.normalize(norm.box_max), [1.0, 1.0, 1.0]);
        let center = (norm.box_min + norm.box_max) * 0.5;
        let n = norm.normalize(center);
        for v in n {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_offset_examples() {
        let r = IntrinsicCoord::uvd(0.5, 0.5, 0.5);
        let same = apply_offset(&r, &[0.0, 0.0, 0.0]);
        assert_eq!(same.as_slice(), r.as_slice());

        let moved = apply_offset(&r, &[0.1, -0.2, 0.0]);
        assert!((moved.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((moved.as_slice()[1] - 0.3).abs() < 1e-15);
        assert_eq!(moved.as_slice()[2], 0.5);

        let clamped = apply_offset(&IntrinsicCoord::uvd(0.95, 0.5, 0.5), &[0.2, 0.0, 0.0]);
        assert_eq!(clamped.as_slice()[0], 1.0);
    }
}
