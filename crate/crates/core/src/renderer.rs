//! Pinhole cameras, proxy-bounded ray sampling and alpha-composited volume
//! rendering, with the exact backward pass the training loop needs.

use crate::field::{GeometryContext, NeuralField};
use crate::geom::{Aabb, Affine, Vec3};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera rotation is not orthonormal (error {0:.3e})")]
    BadRotation(f64),
    #[error("camera intrinsics must be positive (fx={0}, fy={1})")]
    BadIntrinsics(f64, f64),
}

/// Pinhole camera. `world_to_cam` maps world points into the camera frame
/// (+z forward, +x right, +y down); pixels are sampled at their centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_cam: Affine,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::BadIntrinsics(self.fx, self.fy));
        }
        let err = self.world_to_cam.linear.orthonormality_error();
        if err > 1e-6 {
            return Err(RenderError::BadRotation(err));
        }
        Ok(())
    }

    pub fn cam_to_world(&self) -> Affine {
        // Rigid inverse: R^T, -R^T t.
        let rt = self.world_to_cam.linear.transpose();
        Affine::new(rt, -rt.mul_vec(self.world_to_cam.translation))
    }

    pub fn center(&self) -> Vec3 {
        self.cam_to_world().translation
    }

    /// World-space ray through the center of pixel (px, py).
    pub fn ray_for_pixel(&self, px: f64, py: f64) -> Ray {
        let dir_cam = Vec3 {
            x: (px + 0.5 - self.cx) / self.fx,
            y: (py + 0.5 - self.cy) / self.fy,
            z: 1.0,
        };
        let c2w = self.cam_to_world();
        Ray {
            origin: c2w.translation,
            dir: c2w.apply_dir(dir_cam).normalized(),
            pixel: (px as u32, py as u32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub pixel: (u32, u32),
}

pub fn generate_rays(cam: &Camera, pixels: &[(u32, u32)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(px, py)| {
            debug_assert!(px < cam.width && py < cam.height);
            cam.ray_for_pixel(px as f64, py as f64)
        })
        .collect()
}

/// Interval of a ray against the proxy's bounding box dilated by `shell`,
/// clipped to [near, far]. `None` means the ray skips volume rendering
/// entirely and composites to black with zero weight.
pub fn ray_proxy_interval(
    ray: &Ray,
    proxy_bounds: &Aabb,
    shell: f64,
    near: f64,
    far: f64,
) -> Option<(f64, f64)> {
    let dilated = proxy_bounds.dilated(shell);
    match dilated.ray_interval(ray.origin, ray.dir, near, far) {
        Some((t0, t1)) if t1 > t0 => Some((t0, t1)),
        _ => None,
    }
}

/// Depths and spacings of stratified samples along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub depths: Vec<f64>,
    pub spacings: Vec<f64>,
}

impl SampleBatch {
    pub fn position(&self, ray: &Ray, i: usize) -> Vec3 {
        ray.origin + ray.dir * self.depths[i]
    }
}

/// Stratified samples: bin `i` gets `t0 + (i + xi_i) * (t1 - t0) / n`, with
/// `xi_i = 0.5` deterministically or supplied per-bin jitter in [0,1).
/// The last spacing covers the remainder of the interval.
pub fn sample_points(interval: (f64, f64), n: usize, jitter: Option<&[f64]>) -> SampleBatch {
    assert!(n >= 1);
    let (t0, t1) = interval;
    let step = (t1 - t0) / n as f64;
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let xi = jitter.map_or(0.5, |j| j[i]);
        depths.push(t0 + (i as f64 + xi) * step);
    }
    let mut spacings = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { depths[i + 1] } else { t1 };
        spacings.push(next - depths[i]);
    }
    SampleBatch { depths, spacings }
}

/// Color and accumulated opacity of one rendered ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub weight: f64,
}

pub const BLACK: RenderedPixel = RenderedPixel {
    color: [0.0; 3],
    weight: 0.0,
};

/// Front-to-back alpha compositing:
/// `C = sum_i alpha_i prod_{j<i} (1 - alpha_j) c_i`, `W` likewise without
/// the colors, with `alpha_i = 1 - exp(-sigma_i delta_i)`.
pub fn composite(densities: &[f64], colors: &[[f64; 3]], spacings: &[f64]) -> RenderedPixel {
    debug_assert_eq!(densities.len(), colors.len());
    debug_assert_eq!(densities.len(), spacings.len());
    let mut color = [0.0; 3];
    let mut weight = 0.0;
    let mut transmittance = 1.0;
    for i in 0..densities.len() {
        let alpha = 1.0 - (-densities[i] * spacings[i]).exp();
        let w = transmittance * alpha;
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        weight += w;
        transmittance *= 1.0 - alpha;
    }
    RenderedPixel { color, weight }
}

/// Exact gradients of `composite` with respect to densities and colors,
/// given upstream gradients on the pixel color and the weight sum.
/// Numerically safe at alpha -> 1 (no division by transmittance).
pub fn composite_backward(
    densities: &[f64],
    colors: &[[f64; 3]],
    spacings: &[f64],
    d_color: [f64; 3],
    d_weight: f64,
    d_densities: &mut [f64],
    d_colors: &mut [[f64; 3]],
) {
    let n = densities.len();
    debug_assert_eq!(colors.len(), n);
    debug_assert_eq!(spacings.len(), n);
    debug_assert_eq!(d_densities.len(), n);
    debug_assert_eq!(d_colors.len(), n);
    // Forward quantities.
    let mut alpha = vec![0.0; n];
    let mut trans = vec![1.0; n + 1]; // trans[i] = prod_{j<i} (1 - alpha_j)
    for i in 0..n {
        alpha[i] = 1.0 - (-densities[i] * spacings[i]).exp();
        trans[i + 1] = trans[i] * (1.0 - alpha[i]);
    }
    // g_i = d(L)/d(w_i) where w_i = alpha_i * trans[i].
    let g = |i: usize| -> f64 {
        colors[i][0] * d_color[0] + colors[i][1] * d_color[1] + colors[i][2] * d_color[2] + d_weight
    };
    // Suffix sum of g_j w_j for j > i, built back to front.
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let w_i = alpha[i] * trans[i];
        // d(L)/d(sigma_i) = delta_i * (g_i * trans[i+1] - suffix_i)
        d_densities[i] = spacings[i] * (g(i) * trans[i + 1] - suffix);
        for k in 0..3 {
            d_colors[i][k] = w_i * d_color[k];
        }
        suffix += g(i) * w_i;
    }
}

/// How a frame is rendered; shared by offline rendering and training eval.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub n_samples: usize,
    /// Dilation of the proxy box defining the sampling region.
    pub shell: f64,
    /// Transmittance below which the march stops early (0 = exact).
    pub t_floor: f64,
}

/// Per-point field evaluation bound to one frame. `&mut self` lets
/// implementations keep scratch buffers.
pub trait PointEval {
    fn eval(&mut self, x: Vec3) -> (f64, [f64; 3]);
}

/// A renderable field: hands out per-worker evaluators for a frame.
pub trait SceneField: Sync {
    fn evaluator(&self, frame: usize) -> Box<dyn PointEval + '_>;
}

/// Renders one ray: cull, sample, evaluate, composite. Evaluation is lazy so
/// an early-terminated march skips the tail samples.
pub fn render_ray(
    ray: &Ray,
    interval: Option<(f64, f64)>,
    opts: &RenderOptions,
    eval: &mut dyn PointEval,
) -> RenderedPixel {
    let Some((t0, t1)) = interval else {
        return BLACK;
    };
    let samples = sample_points((t0, t1), opts.n_samples, None);
    let mut color = [0.0; 3];
    let mut weight = 0.0;
    let mut transmittance = 1.0;
    for i in 0..samples.depths.len() {
        if transmittance <= opts.t_floor {
            break;
        }
        let (sigma, c) = eval.eval(samples.position(ray, i));
        let alpha = 1.0 - (-sigma * samples.spacings[i]).exp();
        let w = transmittance * alpha;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        weight += w;
        transmittance *= 1.0 - alpha;
    }
    RenderedPixel { color, weight }
}

/// Full-frame render: every pixel through `render_ray`, parallel over rows.
/// Deterministic (no jitter), so repeated renders are bitwise identical.
pub fn render_image(
    cam: &Camera,
    frame: usize,
    field: &dyn SceneField,
    proxy_bounds: &Aabb,
    opts: &RenderOptions,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let w = cam.width as usize;
    let h = cam.height as usize;
    let mut color = vec![[0.0; 3]; w * h];
    let mut weight = vec![0.0; w * h];
    color
        .par_chunks_mut(w)
        .zip(weight.par_chunks_mut(w))
        .enumerate()
        .for_each(|(py, (crow, wrow))| {
            let mut eval = field.evaluator(frame);
            for px in 0..w {
                let ray = cam.ray_for_pixel(px as f64, py as f64);
                let interval = ray_proxy_interval(&ray, proxy_bounds, opts.shell, cam.near, cam.far);
                let out = render_ray(&ray, interval, opts, eval.as_mut());
                crow[px] = out.color;
                wrow[px] = out.weight;
            }
        });
    (color, weight)
}

/// Adapter rendering a `NeuralField` through its geometry context.
pub struct NeuralFieldScene<'a> {
    pub field: &'a NeuralField,
    pub geom: GeometryContext<'a>,
}

struct NeuralFieldEval<'a> {
    scene: &'a NeuralFieldScene<'a>,
    frame: usize,
    state: crate::field::SampleState,
}

impl PointEval for NeuralFieldEval<'_> {
    fn eval(&mut self, x: Vec3) -> (f64, [f64; 3]) {
        let sample = self
            .scene
            .geom
            .intrinsic(x, self.frame, self.scene.field.cfg.coord);
        self.scene
            .field
            .forward_sample(sample.coord.as_slice(), self.frame, &mut self.state);
        (self.state.sigma, self.state.color)
    }
}

impl SceneField for NeuralFieldScene<'_> {
    fn evaluator(&self, frame: usize) -> Box<dyn PointEval + '_> {
        Box::new(NeuralFieldEval {
            scene: self,
            frame,
            state: self.field.make_sample_state(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{vec3, Mat3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera {
            id: 0,
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            world_to_cam: Affine::IDENTITY,
            near: 0.1,
            far: 100.0,
        }
    }

    #[test]
    fn principal_ray_points_forward() {
        let cam = test_camera();
        let ray = cam.ray_for_pixel(cam.cx - 0.5, cam.cy - 0.5);
        assert!((ray.dir - vec3(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(ray.origin, Vec3::ZERO);
    }

    #[test]
    fn ray_origin_is_camera_center_under_pose() {
        let rot = Mat3::rotation(vec3(0.1, 0.9, 0.2), 0.77);
        let t = vec3(1.5, -0.25, 3.0);
        let cam = Camera {
            world_to_cam: Affine::new(rot, t),
            ..test_camera()
        };
        cam.validate().unwrap();
        let expected_center = -rot.transpose().mul_vec(t);
        let ray = cam.ray_for_pixel(10.0, 55.0);
        assert!((ray.origin - expected_center).norm() < 1e-12);
        assert!((ray.origin - cam.center()).norm() < 1e-15);
    }

    #[test]
    fn all_rays_are_unit_length() {
        let cam = test_camera();
        let pixels: Vec<(u32, u32)> = (0..cam.height)
            .flat_map(|py| (0..cam.width).map(move |px| (px, py)))
            .collect();
        for ray in generate_rays(&cam, &pixels) {
            assert!((ray.dir.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn interval_examples() {
        let bounds = Aabb {
            min: vec3(-1.0, -1.0, 4.0),
            max: vec3(1.0, 1.0, 6.0),
        };
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: vec3(0.0, 0.0, 1.0),
            pixel: (0, 0),
        };
        // Aimed away.
        let away = Ray {
            dir: vec3(0.0, 0.0, -1.0),
            ..ray
        };
        assert!(ray_proxy_interval(&away, &bounds, 0.0, 0.01, 100.0).is_none());

        // Through the center: chord equals the slab thickness.
        let (t0, t1) = ray_proxy_interval(&ray, &bounds, 0.0, 0.01, 100.0).unwrap();
        assert!((t0 - 4.0).abs() < 1e-9);
        assert!((t1 - 6.0).abs() < 1e-9);

        // Shell dilation: a grazing ray is caught iff its lateral distance
        // to the box is under the shell.
        let grazing = Ray {
            origin: vec3(1.3, 0.0, 0.0),
            dir: vec3(0.0, 0.0, 1.0),
            pixel: (0, 0),
        };
        let shell = 0.2 * bounds.diagonal();
        assert!(ray_proxy_interval(&grazing, &bounds, 0.0, 0.01, 100.0).is_none());
        let caught = ray_proxy_interval(&grazing, &bounds, shell, 0.01, 100.0);
        assert!(caught.is_some());
        // Dense-sampling oracle: some sampled point along the caught
        // interval is within `shell` of the box.
        let (a, b) = caught.unwrap();
        let mut hit = false;
        for i in 0..1000 {
            let t = a + (b - a) * i as f64 / 999.0;
            let p = grazing.origin + grazing.dir * t;
            if bounds.distance_sq(p).sqrt() <= shell + 1e-9 {
                hit = true;
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn sample_point_examples() {
        let s = sample_points((0.0, 1.0), 1, None);
        assert_eq!(s.depths, vec![0.5]);
        assert_eq!(s.spacings, vec![0.5]);

        let s = sample_points((0.0, 1.0), 4, None);
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        for (i, d) in s.spacings.iter().enumerate().take(3) {
            assert!((d - 0.25).abs() < 1e-15, "spacing {i}");
        }
        assert!((s.spacings[3] - 0.125).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let jitter: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            let s = sample_points((2.0, 3.0), 8, Some(&jitter));
            for w in s.depths.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(s.depths[0] >= 2.0 && *s.depths.last().unwrap() <= 3.0);
        }
    }

    #[test]
    fn composite_examples() {
        // All zero density.
        let out = composite(&[0.0; 4], &[[1.0; 3]; 4], &[0.25; 4]);
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.weight, 0.0);

        // Single opaque sample.
        let out = composite(&[1e12], &[[0.2, 0.4, 0.8]], &[1.0]);
        assert!((out.weight - 1.0).abs() < 1e-12);
        assert!((out.color[2] - 0.8).abs() < 1e-12);

        // Two samples with sigma*delta = ln 2 each: alpha = (1/2, 1/2),
        // C = 0.5 c1 + 0.25 c2, W = 0.75 (hand-expanded).
        let ln2 = std::f64::consts::LN_2;
        let c1 = [1.0, 0.0, 0.5];
        let c2 = [0.0, 1.0, 0.5];
        let out = composite(&[ln2, ln2], &[c1, c2], &[1.0, 1.0]);
        assert!((out.weight - 0.75).abs() < 1e-12);
        for k in 0..3 {
            assert!((out.color[k] - (0.5 * c1[k] + 0.25 * c2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 8;
            let densities: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let colors: Vec<[f64; 3]> =
                (0..n).map(|_| std::array::from_fn(|_| rng.random())).collect();
            let spacings: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
            let d_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let d_weight: f64 = rng.random_range(-1.0..1.0);

            let loss = |dens: &[f64], cols: &[[f64; 3]]| {
                let out = composite(dens, cols, &spacings);
                out.color[0] * d_color[0]
                    + out.color[1] * d_color[1]
                    + out.color[2] * d_color[2]
                    + out.weight * d_weight
            };

            let mut d_dens = vec![0.0; n];
            let mut d_cols = vec![[0.0; 3]; n];
            composite_backward(
                &densities, &colors, &spacings, d_color, d_weight, &mut d_dens, &mut d_cols,
            );

            // Relative error under 1e-6 with an absolute floor at the
            // central-difference noise level.
            let h = 1e-6;
            let close = |g: f64, fd: f64| (g - fd).abs() <= 1e-9 + 1e-6 * g.abs().max(fd.abs());
            for i in 0..n {
                let mut dp = densities.clone();
                dp[i] += h;
                let mut dm = densities.clone();
                dm[i] -= h;
                let fd = (loss(&dp, &colors) - loss(&dm, &colors)) / (2.0 * h);
                assert!(close(d_dens[i], fd), "d_sigma[{i}]: {} vs {}", d_dens[i], fd);
                for k in 0..3 {
                    let mut cp = colors.clone();
                    cp[i][k] += h;
                    let mut cm = colors.clone();
                    cm[i][k] -= h;
                    let fd = (loss(&densities, &cp) - loss(&densities, &cm)) / (2.0 * h);
                    assert!(close(d_cols[i][k], fd), "d_color[{i}][{k}]: {} vs {}", d_cols[i][k], fd);
                }
            }
        }
    }

    #[test]
    fn weight_is_monotone_in_any_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = 6;
            let mut densities: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let colors = vec![[0.5; 3]; n];
            let spacings: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
            let w0 = composite(&densities, &colors, &spacings).weight;
            let i = rng.random_range(0..n);
            densities[i] += rng.random_range(0.0..1.0);
            let w1 = composite(&densities, &colors, &spacings).weight;
            assert!(w1 >= w0 - 1e-12);
        }
    }

    struct ZeroField;
    struct ZeroEval;
    impl PointEval for ZeroEval {
        fn eval(&mut self, _x: Vec3) -> (f64, [f64; 3]) {
            (0.0, [1.0, 1.0, 1.0])
        }
    }
    impl SceneField for ZeroField {
        fn evaluator(&self, _frame: usize) -> Box<dyn PointEval + '_> {
            Box::new(ZeroEval)
        }
    }

    #[test]
    fn zero_density_field_renders_black() {
        let cam = Camera {
            width: 16,
            height: 16,
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            ..test_camera()
        };
        let bounds = Aabb {
            min: vec3(-1.0, -1.0, 4.0),
            max: vec3(1.0, 1.0, 6.0),
        };
        let opts = RenderOptions {
            n_samples: 16,
            shell: 0.2,
            t_floor: 0.0,
        };
        let (color, weight) = render_image(&cam, 0, &ZeroField, &bounds, &opts);
        assert!(color.iter().all(|c| *c == [0.0; 3]));
        assert!(weight.iter().all(|w| *w == 0.0));
    }
}
