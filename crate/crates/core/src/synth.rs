//! Synthetic deforming scenes with analytically known appearance, plus an
//! independent surface-based oracle renderer for ground truth.
//!
//! The proxy geometry is a deforming uv-sphere mesh. The true surface is the
//! proxy displaced along its pseudo-normals by a bump field defined on the
//! UV atlas; the bump pattern (and the texture with it) can slide across the
//! atlas over time, which models per-frame proxy misregistration: the kind of
//! error the learned offset field exists to absorb. The oracle renders by
//! root-finding the displaced-surface implicit function along rays; it shares
//! no field evaluation or compositing code with the volume renderer.

use crate::geom::{vec3, Affine, Mat3, Vec3};
use crate::img::Rgb64;
use crate::mesh::{validate_sequence, ProxySequence, TriangleMesh};
use crate::renderer::Camera;
use crate::spatial::{self, Bvh};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Checker frequency along each UV axis (tiles of size 0.5/freq).
    pub checker_freq: u32,
    /// Softness of checker transitions; smaller is sharper.
    pub edge_width: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Strength of an additional UV-dependent tint.
    pub gradient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub count: usize,
    pub orbit_radius: f64,
    /// Elevation above the equator, radians.
    pub elevation: f64,
    pub image_size: u32,
    /// Focal length as a fraction of the image size.
    pub focal_rel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rings: usize,
    pub segments: usize,
    pub radius: f64,
    pub n_frames: usize,
    /// Rigid rotation schedule: total angle about `rot_axis` over the clip.
    pub rot_axis: Vec3,
    pub rot_total: f64,
    /// Anisotropic scale schedule on one axis, 1 at frame 0.
    pub scale_axis: usize,
    pub scale_total: f64,
    pub translate_total: Vec3,
    /// Bump displacement amplitude relative to the radius.
    pub bump_amplitude: f64,
    pub bump_freq: u32,
    /// Total slide of the bump+texture pattern along u over the clip.
    pub bump_travel: f64,
    pub texture: TextureSpec,
    /// Material-space light for the analytic shading.
    pub light_dir: Vec3,
    pub ambient: f64,
    pub diffuse: f64,
    pub rig: CameraRig,
    /// Number of trailing cameras held out for evaluation.
    pub eval_cams: usize,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            rings: 16,
            segments: 32,
            radius: 1.0,
            n_frames: 20,
            rot_axis: vec3(0.0, 1.0, 0.0),
            rot_total: 0.6,
            scale_axis: 1,
            scale_total: 1.15,
            translate_total: Vec3::ZERO,
            bump_amplitude: 0.03,
            bump_freq: 3,
            bump_travel: 0.05,
            texture: TextureSpec {
                checker_freq: 3,
                edge_width: 0.25,
                color_a: [0.85, 0.35, 0.25],
                color_b: [0.2, 0.45, 0.8],
                gradient: 0.15,
            },
            light_dir: vec3(0.5, 0.6, 0.45),
            ambient: 0.55,
            diffuse: 0.45,
            rig: CameraRig {
                count: 8,
                orbit_radius: 4.0,
                elevation: 0.3,
                image_size: 64,
                focal_rel: 1.1875,
            },
            eval_cams: 1,
        }
    }
}

impl SceneSpec {
    /// The default scene with the bump field (and its slide) removed; the
    /// proxy then tracks the true surface exactly.
    pub fn zero_bump() -> SceneSpec {
        SceneSpec {
            bump_amplitude: 0.0,
            bump_travel: 0.0,
            ..SceneSpec::default()
        }
    }

    /// Purely rigid motion with exact proxies; used by the correspondence
    /// properties.
    pub fn rigid() -> SceneSpec {
        SceneSpec {
            scale_total: 1.0,
            translate_total: vec3(0.4, 0.15, -0.25),
            rot_total: 0.8,
            bump_amplitude: 0.0,
            bump_travel: 0.0,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.rings < 3 || self.segments < 3 {
            return Err(SynthError::InvalidSpec("need rings >= 3 and segments >= 3".into()));
        }
        if self.n_frames < 1 {
            return Err(SynthError::InvalidSpec("need at least one frame".into()));
        }
        if self.rig.count < 1 {
            return Err(SynthError::InvalidSpec("camera count must be >= 1".into()));
        }
        if self.eval_cams >= self.rig.count {
            return Err(SynthError::InvalidSpec(
                "eval cameras must leave at least one training camera".into(),
            ));
        }
        // The true surface must stay inside the culled shell around the
        // proxy (shell is 0.15 of the bounding-box diagonal downstream).
        let shell = 0.15 * (2.0 * self.radius * 3.0_f64.sqrt());
        if self.bump_amplitude.abs() * self.radius >= shell {
            return Err(SynthError::InvalidSpec(format!(
                "bump amplitude {} exceeds the culling shell {}",
                self.bump_amplitude * self.radius,
                shell
            )));
        }
        if !(self.radius > 0.0) {
            return Err(SynthError::InvalidSpec("radius must be positive".into()));
        }
        Ok(())
    }

    /// Schedule parameter of frame `t` in [0,1].
    pub fn phase(&self, t: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            t as f64 / (self.n_frames - 1) as f64
        }
    }

    /// Material-to-world deformation of frame `t`.
    pub fn deformation(&self, t: usize) -> Affine {
        let s = self.phase(t);
        let mut scale = [1.0, 1.0, 1.0];
        scale[self.scale_axis] = 1.0 + (self.scale_total - 1.0) * s;
        let linear = Mat3::rotation(self.rot_axis, self.rot_total * s)
            .mul_mat(&Mat3::scale(scale[0], scale[1], scale[2]));
        Affine::new(linear, self.translate_total * s)
    }

    /// Slide of the bump+texture pattern along u at frame `t`.
    pub fn pattern_shift(&self, t: usize) -> f64 {
        self.bump_travel * self.phase(t)
    }
}

/// UV-sphere with shared vertices and a per-corner UV atlas whose seam runs
/// along u = 0/1. Winding is counter-clockwise viewed from outside.
pub fn uv_sphere(rings: usize, segments: usize, radius: f64) -> TriangleMesh {
    assert!(rings >= 3 && segments >= 3);
    let dir = |u: f64, v: f64| -> Vec3 {
        let theta = std::f64::consts::PI * v;
        let phi = 2.0 * std::f64::consts::PI * u;
        vec3(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin())
    };
    let mut vertices = vec![dir(0.0, 0.0) * radius]; // north pole
    for i in 1..rings {
        let v = i as f64 / rings as f64;
        for k in 0..segments {
            let u = k as f64 / segments as f64;
            vertices.push(dir(u, v) * radius);
        }
    }
    vertices.push(dir(0.0, 1.0) * radius); // south pole
    let ring_vertex = |i: usize, k: usize| -> u32 { (1 + (i - 1) * segments + (k % segments)) as u32 };
    let south = (vertices.len() - 1) as u32;

    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    let u_of = |k: usize| k as f64 / segments as f64;
    let v_of = |i: usize| i as f64 / rings as f64;

    // Top fan, flipped so normals point outward.
    for k in 0..segments {
        faces.push([0, ring_vertex(1, k + 1), ring_vertex(1, k)]);
        uvs.push([(k as f64 + 0.5) / segments as f64, 0.0]);
        uvs.push([u_of(k + 1), v_of(1)]);
        uvs.push([u_of(k), v_of(1)]);
    }
    // Quads between interior rings.
    for i in 1..rings - 1 {
        for k in 0..segments {
            let tl = ring_vertex(i, k);
            let tr = ring_vertex(i, k + 1);
            let bl = ring_vertex(i + 1, k);
            let br = ring_vertex(i + 1, k + 1);
            faces.push([tl, tr, br]);
            uvs.push([u_of(k), v_of(i)]);
            uvs.push([u_of(k + 1), v_of(i)]);
            uvs.push([u_of(k + 1), v_of(i + 1)]);
            faces.push([tl, br, bl]);
            uvs.push([u_of(k), v_of(i)]);
            uvs.push([u_of(k + 1), v_of(i + 1)]);
            uvs.push([u_of(k), v_of(i + 1)]);
        }
    }
    // Bottom fan.
    for k in 0..segments {
        faces.push([south, ring_vertex(rings - 1, k), ring_vertex(rings - 1, k + 1)]);
        uvs.push([(k as f64 + 0.5) / segments as f64, 1.0]);
        uvs.push([u_of(k), v_of(rings - 1)]);
        uvs.push([u_of(k + 1), v_of(rings - 1)]);
    }
    TriangleMesh::new(vertices, faces, uvs).expect("sphere construction is valid")
}

/// The generated scene: proxies the reconstruction sees, plus the analytic
/// truth the oracle renders.
pub struct TrueScene {
    pub spec: SceneSpec,
    /// Undeformed base mesh (frame-0 geometry without bumps).
    pub base: TriangleMesh,
    pub base_bvh: Bvh,
    /// Material-to-world transform per frame.
    pub deforms: Vec<Affine>,
    pub proxies: ProxySequence,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<TrueScene, SynthError> {
    spec.validate()?;
    let base = uv_sphere(spec.rings, spec.segments, spec.radius);
    let base_bvh = spatial::build_bvh(&base);
    let deforms: Vec<Affine> = (0..spec.n_frames).map(|t| spec.deformation(t)).collect();
    let frames: Vec<TriangleMesh> = deforms
        .iter()
        .map(|a| base.transformed(|p| a.apply(p)))
        .collect();
    let proxies = validate_sequence(frames).expect("generated frames share topology");
    Ok(TrueScene {
        spec: *spec,
        base,
        base_bvh,
        deforms,
        proxies,
    })
}

impl TrueScene {
    /// Bump height over the atlas at frame `t` (material units).
    pub fn bump_height(&self, u: f64, v: f64, t: usize) -> f64 {
        let s = &self.spec;
        if s.bump_amplitude == 0.0 {
            return 0.0;
        }
        let f = s.bump_freq as f64;
        let us = u - s.pattern_shift(t);
        let two_pi = 2.0 * std::f64::consts::PI;
        s.bump_amplitude * s.radius * (two_pi * f * us).sin() * (two_pi * f * v).sin()
    }

    /// Implicit function of the true surface in material space: signed
    /// distance to the base mesh minus the local bump height. Zero on the
    /// displaced surface, positive outside.
    pub fn implicit(&self, y: Vec3, t: usize) -> f64 {
        let sp = spatial::closest_point(y, &self.base, &self.base_bvh);
        let d = spatial::signed_distance_at(y, &sp, &self.base, &self.base_bvh);
        let uv = spatial::surface_uv(&sp, &self.base);
        d.value - self.bump_height(uv[0], uv[1], t)
    }

    /// Procedural albedo on the sliding material parameterization.
    pub fn albedo(&self, u: f64, v: f64, t: usize) -> [f64; 3] {
        let s = &self.spec;
        let us = (u - s.pattern_shift(t)).rem_euclid(1.0);
        let tex = &s.texture;
        let f = tex.checker_freq as f64;
        let two_pi = 2.0 * std::f64::consts::PI;
        // Smooth periodic square waves; their product alternates tiles.
        let sq = |x: f64| (x.sin() / tex.edge_width.max(1e-6)).tanh();
        let wave = sq(two_pi * f * us) * sq(two_pi * f * v);
        let mix = 0.5 * (1.0 + wave);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = mix * tex.color_a[k] + (1.0 - mix) * tex.color_b[k];
        }
        // Mild tint so the texture is not symmetric in uv.
        c[0] += tex.gradient * (us - 0.5);
        c[2] += tex.gradient * (v - 0.5);
        c.map(|x| x.clamp(0.0, 1.0))
    }

    /// Shaded color of a material-space point on (or near) the true surface.
    /// The normal is the numerical gradient of the implicit, the light is
    /// fixed in material space so appearance moves only with the pattern.
    pub fn shaded_color(&self, y: Vec3, t: usize) -> [f64; 3] {
        let sp = spatial::closest_point(y, &self.base, &self.base_bvh);
        let uv = spatial::surface_uv(&sp, &self.base);
        let albedo = self.albedo(uv[0], uv[1], t);
        let h = 1e-5 * self.spec.radius;
        let grad = vec3(
            self.implicit(y + vec3(h, 0.0, 0.0), t) - self.implicit(y - vec3(h, 0.0, 0.0), t),
            self.implicit(y + vec3(0.0, h, 0.0), t) - self.implicit(y - vec3(0.0, h, 0.0), t),
            self.implicit(y + vec3(0.0, 0.0, h), t) - self.implicit(y - vec3(0.0, 0.0, h), t),
        )
        .normalized();
        let l = self.spec.light_dir.normalized();
        let shade = self.spec.ambient + self.spec.diffuse * grad.dot(l).max(0.0);
        albedo.map(|a| (a * shade).clamp(0.0, 1.0))
    }

    /// Radius of a bounding sphere of the true surface in material space.
    pub fn material_bound(&self) -> f64 {
        self.spec.radius * (1.0 + self.spec.bump_amplitude.abs()) * 1.05 + 1e-9
    }

    /// First intersection of a world-space ray with the true surface at
    /// frame `t`, as the world ray parameter. Conservative distance marching
    /// down to a sign bracket, then bisection.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64, frame: usize) -> Option<f64> {
        let inv = self.deforms[frame].inverse();
        let y0 = inv.apply(origin);
        let dm = inv.apply_dir(dir);
        let dm_norm = dm.norm();
        // Clip against the material bounding sphere.
        let rb = self.material_bound();
        let a = dm.norm_sq();
        let b = 2.0 * y0.dot(dm);
        let c = y0.norm_sq() - rb * rb;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            return None;
        }
        let sqrt_disc = disc.sqrt();
        let t_in = ((-b - sqrt_disc) / (2.0 * a)).max(t_min);
        let t_out = ((-b + sqrt_disc) / (2.0 * a)).min(t_max);
        if t_in >= t_out {
            return None;
        }
        // March. The implicit is Lipschitz ~ (1 + bump slope) in material
        // units; the 0.4 safety factor plus a floor keeps steps from jumping
        // the zero set while bounding the iteration count.
        let min_step = 5e-4 * self.spec.radius / dm_norm;
        let mut t = t_in;
        let mut g_prev = self.implicit(y0 + dm * t, frame);
        if g_prev <= 0.0 {
            return Some(t); // started inside
        }
        let mut t_prev = t;
        let mut iters = 0;
        loop {
            let step = (0.4 * g_prev / dm_norm).max(min_step);
            t += step;
            if t > t_out || iters > 8192 {
                return None;
            }
            iters += 1;
            let g = self.implicit(y0 + dm * t, frame);
            if g <= 0.0 {
                // Bisection on [t_prev, t].
                let mut lo = t_prev;
                let mut hi = t;
                for _ in 0..64 {
                    let mid = 0.5 * (lo + hi);
                    if self.implicit(y0 + dm * mid, frame) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            t_prev = t;
            g_prev = g;
        }
    }

    /// World-space point on a sampled location of the true surface:
    /// a base-mesh interior point displaced along its face normal by the
    /// bump height, then deformed. Exact zeros of the implicit.
    pub fn sample_true_surface(
        &self,
        frame: usize,
        face: usize,
        bary: [f64; 3],
    ) -> Vec3 {
        let [a, b, c] = self.base.face_vertices(face);
        let q = a * bary[0] + b * bary[1] + c * bary[2];
        let uvs = self.base.face_uvs(face);
        let u = uvs[0][0] * bary[0] + uvs[1][0] * bary[1] + uvs[2][0] * bary[2];
        let v = uvs[0][1] * bary[0] + uvs[1][1] * bary[1] + uvs[2][1] * bary[2];
        let n = self.base.face_normals[face];
        let y = q + n * self.bump_height(u, v, frame);
        self.deforms[frame].apply(y)
    }
}

/// Surface-rendered ground truth for one camera and frame: ray/true-surface
/// intersection by bisection; hits get the shaded texture color and mask 1,
/// misses are black with mask 0.
pub fn oracle_render(scene: &TrueScene, cam: &Camera, frame: usize) -> (Rgb64, Vec<bool>) {
    let w = cam.width as usize;
    let h = cam.height as usize;
    let mut pixels = vec![[0.0; 3]; w * h];
    let mut mask = vec![false; w * h];
    let inv = scene.deforms[frame].inverse();
    pixels
        .par_chunks_mut(w)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(py, (prow, mrow))| {
            for px in 0..w {
                let ray = cam.ray_for_pixel(px as f64, py as f64);
                if let Some(t) = scene.intersect(ray.origin, ray.dir, cam.near, cam.far, frame) {
                    let y = inv.apply(ray.origin + ray.dir * t);
                    prow[px] = scene.shaded_color(y, frame);
                    mrow[px] = true;
                }
            }
        });
    (Rgb64::from_pixels(cam.width, cam.height, pixels), mask)
}

/// The camera rig of a scene: equally spaced azimuths on an orbit at fixed
/// elevation, all aimed at the origin.
pub fn rig_cameras(spec: &SceneSpec) -> Vec<Camera> {
    let rig = &spec.rig;
    let size = rig.image_size;
    let focal = rig.focal_rel * size as f64;
    (0..rig.count)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / rig.count as f64;
            let pos = vec3(
                rig.orbit_radius * rig.elevation.cos() * az.cos(),
                rig.orbit_radius * rig.elevation.sin(),
                rig.orbit_radius * rig.elevation.cos() * az.sin(),
            );
            let forward = (-pos).normalized();
            let up = vec3(0.0, 1.0, 0.0);
            let right = forward.cross(up).normalized();
            let down = forward.cross(right);
            let linear = Mat3::from_rows(right, down, forward);
            let world_to_cam = Affine::new(linear, -linear.mul_vec(pos));
            Camera {
                id: i as u32,
                fx: focal,
                fy: focal,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                width: size,
                height: size,
                world_to_cam,
                near: (rig.orbit_radius - 3.0 * spec.radius).max(0.05 * rig.orbit_radius),
                far: rig.orbit_radius + 3.0 * spec.radius,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_mesh_is_outward_and_in_atlas() {
        let m = uv_sphere(8, 12, 2.0);
        for f in 0..m.faces.len() {
            let [a, b, c] = m.face_vertices(f);
            let center = (a + b + c) / 3.0;
            assert!(
                m.face_normals[f].dot(center) > 0.0,
                "face {f} points inward"
            );
        }
        for uv in &m.uv_per_corner {
            assert!((0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1]));
        }
        // All vertices on the sphere.
        for v in &m.vertices {
            assert!((v.norm() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_bump_scene_true_surface_is_the_proxy() {
        let scene = generate_scene(&SceneSpec::zero_bump()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let face = rng.random_range(0..scene.base.faces.len());
            let (mut b0, mut b1): (f64, f64) = (rng.random(), rng.random());
            if b0 + b1 > 1.0 {
                b0 = 1.0 - b0;
                b1 = 1.0 - b1;
            }
            let bary = [1.0 - b0 - b1, b0, b1];
            for t in [0, scene.spec.n_frames - 1] {
                let p_world = scene.sample_true_surface(t, face, bary);
                let frame_mesh = &scene.proxies.frames[t];
                let bvh = spatial::build_bvh(frame_mesh);
                let d = spatial::signed_distance(p_world, frame_mesh, &bvh);
                assert!(d.value.abs() < 1e-6, "sd {} at frame {t}", d.value);
            }
        }
    }

    #[test]
    fn identity_schedule_gives_identical_frames() {
        let spec = SceneSpec {
            rot_total: 0.0,
            scale_total: 1.0,
            translate_total: Vec3::ZERO,
            n_frames: 4,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        for f in &scene.proxies.frames {
            assert_eq!(f.vertices, scene.proxies.frames[0].vertices);
        }
    }

    #[test]
    fn scale_schedule_shows_in_final_bounding_box() {
        let spec = SceneSpec {
            rot_total: 0.0,
            scale_axis: 0,
            scale_total: 1.3,
            bump_amplitude: 0.0,
            bump_travel: 0.0,
            n_frames: 5,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let last = scene.proxies.frames.last().unwrap();
        let bounds = Aabb::from_points(last.vertices.iter().copied());
        assert!((bounds.max.x - 1.3).abs() < 1e-9);
        assert!((bounds.max.y - 1.0).abs() < 1e-9);
        assert!((bounds.max.z - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bumped_surface_points_are_implicit_zeros() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let face = rng.random_range(0..scene.base.faces.len());
            // Interior barycentrics away from edges so the displacement
            // direction is the face normal the implicit sees.
            let (b0, b1) = (
                0.15 + 0.3 * rng.random::<f64>(),
                0.15 + 0.3 * rng.random::<f64>(),
            );
            let bary = [1.0 - b0 - b1, b0, b1];
            let t = rng.random_range(0..scene.spec.n_frames);
            let world = scene.sample_true_surface(t, face, bary);
            let y = scene.deforms[t].inverse().apply(world);
            assert!(
                scene.implicit(y, t).abs() < 1e-9,
                "implicit {}",
                scene.implicit(y, t)
            );
        }
    }

    #[test]
    fn camera_rig_is_valid_and_aimed() {
        let spec = SceneSpec::default();
        let cams = rig_cameras(&spec);
        assert_eq!(cams.len(), 8);
        for cam in &cams {
            cam.validate().unwrap();
            assert!((cam.world_to_cam.linear.determinant() - 1.0).abs() < 1e-9);
            // The origin projects to the principal point.
            let p = cam.world_to_cam.apply(Vec3::ZERO);
            assert!(p.z > 0.0);
            assert!((p.x / p.z).abs() < 1e-12 && (p.y / p.z).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_mask_is_a_centered_disc_of_projected_radius() {
        let spec = SceneSpec {
            rot_total: 0.0,
            scale_total: 1.0,
            ..SceneSpec::zero_bump()
        };
        let scene = generate_scene(&spec).unwrap();
        let cams = rig_cameras(&spec);
        let cam = &cams[0];
        let (_, mask) = oracle_render(&scene, cam, 0);
        // Pinhole projection of a sphere of radius R at distance z covers
        // about f * R / sqrt(z^2 - R^2) pixels; at z >> R this is close to
        // f*R/z. The polygonal proxy is inscribed, so compare within 1 px.
        let z = spec.rig.orbit_radius;
        let r = spec.radius;
        let expected = cam.fx * r / (z * z - r * r).sqrt();
        let area = mask.iter().filter(|&&m| m).count() as f64;
        let measured = (area / std::f64::consts::PI).sqrt();
        assert!(
            (measured - expected).abs() < 1.0,
            "disc radius {measured} vs expected {expected}"
        );
        // Looking away: empty image and mask.
        let mut away = cam.clone();
        let flip = Mat3::rotation(vec3(1.0, 0.0, 0.0), std::f64::consts::PI);
        away.world_to_cam = Affine::new(
            flip.mul_mat(&away.world_to_cam.linear),
            flip.mul_vec(away.world_to_cam.translation) - vec3(0.0, 0.0, 2.0 * z),
        );
        let (img, mask) = oracle_render(&scene, &away, 0);
        assert!(mask.iter().all(|&m| !m));
        assert!(img.pixels.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn checker_tiles_project_where_expected() {
        let spec = SceneSpec {
            rot_total: 0.0,
            scale_total: 1.0,
            ..SceneSpec::zero_bump()
        };
        let scene = generate_scene(&spec).unwrap();
        let cam = &rig_cameras(&spec)[0];
        let (img, _) = oracle_render(&scene, cam, 0);
        // Two adjacent tile centers on the sphere, projected into the image,
        // must show colors matching the analytic texture at those points.
        // Camera 0 sits at azimuth 0 and sees u near 0; stay within ~30
        // degrees of the view axis so the points are clearly front-facing.
        let f = spec.texture.checker_freq as f64;
        for (du, _label) in [(0.25 / (2.0 * f), "tile a"), (-0.25 / (2.0 * f), "tile b")] {
            let u = (du as f64).rem_euclid(1.0);
            let v = 0.55; // just below the equator, well inside the disc
            let theta = std::f64::consts::PI * v;
            let phi = 2.0 * std::f64::consts::PI * u;
            let dir = vec3(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            // Nearest mesh point to the analytic direction.
            let sp = spatial::closest_point(dir * spec.radius, &scene.base, &scene.base_bvh);
            let world = sp.position;
            let pc = cam.world_to_cam.apply(world);
            let px = (cam.fx * pc.x / pc.z + cam.cx - 0.5).round();
            let py = (cam.fy * pc.y / pc.z + cam.cy - 0.5).round();
            assert!(px >= 0.0 && py >= 0.0);
            let got = img.at(px as u32, py as u32);
            let uv = spatial::surface_uv(&sp, &scene.base);
            let want = scene.shaded_color(sp.position, 0);
            let err: f64 = (0..3).map(|k| (got[k] - want[k]).abs()).sum();
            assert!(
                err < 0.2,
                "projected tile color mismatch at uv ({:.3},{:.3}): {got:?} vs {want:?}",
                uv[0],
                uv[1]
            );
        }
    }
}
