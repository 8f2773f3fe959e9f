//! Loss terms, the two-phase weighting schedule, and the ray-batch training
//! loop.
//!
//! Determinism: all random draws (batch pixels, per-sample jitter) happen
//! sequentially up front each iteration; ray chunks have a fixed size and
//! their dense gradients are merged in chunk order, so results do not depend
//! on the worker count. Hash-table gradients accumulate through atomic adds
//! and may differ across runs by summation order only (bounded by the
//! encoder's 1e-10 agreement contract); single-threaded runs are exactly
//! reproducible.

use crate::dataset::Dataset;
use crate::field::{
    BackwardScratch, CoordKind, FieldAdam, FieldConfig, FieldGradients, GeometryContext,
    NeuralField, SummedGrads,
};
use crate::renderer::NeuralFieldScene;
use std::sync::Mutex;
use crate::geom::Aabb;
use crate::img::{PixelBox, Rgb64};
use crate::intrinsic::{DistanceSquash, SequenceQueries, TemplateNormalizer};
use crate::metrics;
use crate::mlp::lr_schedule;
use crate::renderer::{
    composite_backward, ray_proxy_interval, sample_points, RenderOptions,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset mismatch: {0}")]
    Preflight(String),
    #[error("non-finite loss at iteration {iter}: rgb={l_rgb} mask={l_mask} dist={l_dist} dfm={l_dfm}")]
    NonFinite {
        iter: u64,
        l_rgb: f64,
        l_mask: f64,
        l_dist: f64,
        l_dfm: f64,
        /// (camera index, frame, px, py) of the offending batch.
        batch: Vec<(u32, u32, u32, u32)>,
    },
    #[error(transparent)]
    Encoding(#[from] crate::encoding::EncodingError),
    #[error(transparent)]
    Mlp(#[from] crate::mlp::MlpError),
}

/// Regularizer weights and the two-phase schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_dist: f64,
    pub lambda_dfm: f64,
    /// Distance-loss sharpness, inverse scene units.
    pub beta: f64,
    /// Iteration at which the regularizer weight drops.
    pub phase_switch_iter: u64,
    /// Regularizer scale before/after the switch.
    pub lambda_early: f64,
    pub lambda_late: f64,
}

impl LossWeights {
    /// The phase scalar applied to the whole regularization term.
    pub fn lambda(&self, iter: u64) -> f64 {
        if iter < self.phase_switch_iter {
            self.lambda_early
        } else {
            self.lambda_late
        }
    }
}

/// Mean over rays of the Euclidean norm of the color residual.
pub fn photometric_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(!pred.is_empty());
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    sum / pred.len() as f64
}

/// Mean over rays of `W (1 - M) + (1 - W) M`.
pub fn mask_loss(weight_sums: &[f64], mask_bits: &[bool]) -> f64 {
    assert_eq!(weight_sums.len(), mask_bits.len());
    assert!(!weight_sums.is_empty());
    let sum: f64 = weight_sums
        .iter()
        .zip(mask_bits)
        .map(|(&w, &m)| if m { 1.0 - w } else { w })
        .sum();
    sum / weight_sums.len() as f64
}

/// Mean over samples of `sigma * exp(relu(d) * beta)`: density outside the
/// surface is penalized exponentially in its distance, density inside gets
/// weight one (the formula as given, not a cutoff).
pub fn distance_loss(densities: &[f64], signed_distances: &[f64], beta: f64) -> f64 {
    assert_eq!(densities.len(), signed_distances.len());
    if densities.is_empty() {
        return 0.0;
    }
    let sum: f64 = densities
        .iter()
        .zip(signed_distances)
        .map(|(&s, &d)| s * (d.max(0.0) * beta).exp())
        .sum();
    sum / densities.len() as f64
}

/// Mean over samples of the Euclidean norm of the offset output.
pub fn offset_reg_loss(offsets: &[Vec<f64>]) -> f64 {
    if offsets.is_empty() {
        return 0.0;
    }
    let sum: f64 = offsets
        .iter()
        .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum();
    sum / offsets.len() as f64
}

/// `L_rgb + lambda(iter) * (lm L_mask + ld L_dist + lf L_dfm)`.
pub fn total_loss(
    l_rgb: f64,
    l_mask: f64,
    l_dist: f64,
    l_dfm: f64,
    weights: &LossWeights,
    iter: u64,
) -> f64 {
    l_rgb
        + weights.lambda(iter)
            * (weights.lambda_mask * l_mask
                + weights.lambda_dist * l_dist
                + weights.lambda_dfm * l_dfm)
}

/// Everything the training loop needs beyond the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub lambda_mask: f64,
    pub lambda_dist: f64,
    pub lambda_dfm: f64,
    /// beta = beta_over_diag / template diagonal.
    pub beta_over_diag: f64,
    /// squash steepness k = squash_over_diag / template diagonal.
    pub squash_over_diag: f64,
    /// shell = shell_frac * template diagonal.
    pub shell_frac: f64,
    pub phase_switch_iter: u64,
    pub lambda_late: f64,
    /// Fraction of each batch drawn from pixels outside the dilated mask.
    pub exterior_fraction: f64,
    /// Dilation radius (pixels) of the training mask pool.
    pub mask_dilation: u32,
    /// Worker threads; 0 uses all cores, 1 is fully deterministic.
    pub threads: usize,
    /// Held-out PSNR evaluation period; 0 disables.
    pub eval_every: u64,
    /// Evaluate every k-th frame during periodic eval.
    pub eval_frame_stride: usize,
    /// Early-termination transmittance for training marches (0 = exact).
    pub t_floor: f64,
    pub coord: CoordKind,
    pub hash: crate::encoding::HashGridConfig,
    pub offset_hash: crate::encoding::HashGridConfig,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub latent_dim: usize,
    pub offset_scale: f64,
    pub offsets_enabled: bool,
    pub indexing: crate::encoding::IndexingMode,
    pub table_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            iters: 3000,
            batch_rays: 4096,
            n_samples: 64,
            lr_start: 2e-3,
            lr_end: 2e-5,
            seed: 1,
            lambda_mask: 0.1,
            lambda_dist: 0.01,
            lambda_dfm: 0.01,
            beta_over_diag: 20.0,
            squash_over_diag: 8.0,
            shell_frac: 0.15,
            phase_switch_iter: 400,
            lambda_late: 0.1,
            exterior_fraction: 0.2,
            mask_dilation: 4,
            threads: 0,
            eval_every: 0,
            eval_frame_stride: 4,
            t_floor: 1e-7,
            coord: CoordKind::UvD,
            hash: crate::encoding::HashGridConfig::default(),
            offset_hash: crate::encoding::HashGridConfig::default(),
            hidden_dim: 64,
            hidden_layers: 2,
            latent_dim: 8,
            offset_scale: 0.05,
            offsets_enabled: true,
            indexing: crate::encoding::IndexingMode::HashedAuto,
            table_init_scale: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn field_config(&self, n_frames: usize) -> FieldConfig {
        FieldConfig {
            coord: self.coord,
            hash: self.hash,
            offset_hash: self.offset_hash,
            hidden_dim: self.hidden_dim,
            hidden_layers: self.hidden_layers,
            latent_dim: self.latent_dim,
            offset_scale: self.offset_scale,
            offsets_enabled: self.offsets_enabled,
            indexing: self.indexing,
            n_frames,
            table_init_scale: self.table_init_scale,
        }
    }

    pub fn loss_weights(&self, diagonal: f64) -> LossWeights {
        LossWeights {
            lambda_mask: self.lambda_mask,
            lambda_dist: self.lambda_dist,
            lambda_dfm: self.lambda_dfm,
            beta: self.beta_over_diag / diagonal,
            phase_switch_iter: self.phase_switch_iter,
            lambda_early: 1.0,
            lambda_late: self.lambda_late,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: u64,
    pub l_rgb: f64,
    pub l_mask: f64,
    pub l_dist: f64,
    pub l_dfm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub iter: u64,
    pub mean_psnr: f64,
}

/// Result of a training run: the model plus everything needed to render and
/// resume.
pub struct Trained {
    pub field: NeuralField,
    pub adam: FieldAdam,
    pub iteration: u64,
    pub weights: LossWeights,
    pub squash: DistanceSquash,
    pub normalizer: TemplateNormalizer,
    pub shell: f64,
    pub log: Vec<LossRow>,
    pub eval_log: Vec<EvalRow>,
}

/// One training pixel: camera index, frame, pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct PoolEntry {
    cam: u32,
    frame: u32,
    px: u32,
    py: u32,
}

/// Binary dilation by a square structuring element of radius `r` (two
/// separable max passes).
fn dilate_mask(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut tmp = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            tmp[y * width + x] = (lo..=hi).any(|i| mask[y * width + i]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|j| tmp[j * width + x]);
        }
    }
    out
}

fn preflight(dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.seq.is_empty() {
        return Err(TrainError::Preflight("no proxy frames".into()));
    }
    if dataset.split.train_cams.is_empty() {
        return Err(TrainError::Preflight("no training cameras in split".into()));
    }
    for id in &dataset.split.train_cams {
        if dataset.camera_index(*id).is_none() {
            return Err(TrainError::Preflight(format!("unknown training camera id {id}")));
        }
    }
    for (ci, cam) in dataset.cameras.iter().enumerate() {
        for frame in 0..dataset.n_frames() {
            let img = dataset.image(ci, frame);
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(TrainError::Preflight(format!(
                    "image for camera {} frame {frame} is {}x{}, camera says {}x{}",
                    cam.id, img.width, img.height, cam.width, cam.height
                )));
            }
            if dataset.mask(ci, frame).len() != (cam.width * cam.height) as usize {
                return Err(TrainError::Preflight(format!(
                    "mask for camera {} frame {frame} has wrong size",
                    cam.id
                )));
            }
        }
    }
    Ok(())
}

const CHUNK_RAYS: usize = 64;

#[derive(Default, Clone, Copy)]
struct ChunkSums {
    rgb: f64,
    mask: f64,
    dist: f64,
    dfm: f64,
}

/// Reusable per-worker buffers: gradient accumulators plus forward caches.
/// Chunks check workers out of a pool, so each is used by one thread at a
/// time and gradients merge additively at the optimizer step.
struct GradWorker {
    grads: FieldGradients,
    states: Vec<crate::field::SampleState>,
    scratch: BackwardScratch,
    sigmas: Vec<f64>,
    colors: Vec<[f64; 3]>,
    sds: Vec<f64>,
    d_sigmas: Vec<f64>,
    d_colors: Vec<[f64; 3]>,
}

impl GradWorker {
    fn new(field: &NeuralField, n_samples: usize) -> GradWorker {
        GradWorker {
            grads: FieldGradients::zeros_like(field),
            states: (0..n_samples).map(|_| field.make_sample_state()).collect(),
            scratch: BackwardScratch::for_field(field),
            sigmas: vec![0.0; n_samples],
            colors: vec![[0.0; 3]; n_samples],
            sds: vec![0.0; n_samples],
            d_sigmas: vec![0.0; n_samples],
            d_colors: vec![[0.0; 3]; n_samples],
        }
    }
}

/// Receives each periodic eval render: (iteration, camera id, frame, image).
pub type EvalSink<'a> = &'a mut dyn FnMut(u64, u32, usize, &Rgb64);

/// Trains a field on a dataset. The per-iteration loss log and the periodic
/// held-out PSNR log come back with the model.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<Trained, TrainError> {
    train_with_eval_sink(dataset, cfg, &mut |_, _, _, _| {})
}

pub fn train_with_eval_sink(
    dataset: &Dataset,
    cfg: &TrainConfig,
    eval_sink: EvalSink,
) -> Result<Trained, TrainError> {
    preflight(dataset)?;
    let queries = SequenceQueries::new(dataset.seq.clone());
    let bounds = queries.seq.template().bounds();
    let diagonal = bounds.diagonal();
    let squash = DistanceSquash::new(cfg.squash_over_diag / diagonal);
    let normalizer = TemplateNormalizer::for_template_bounds(&bounds);
    let shell = cfg.shell_frac * diagonal;
    let weights = cfg.loss_weights(diagonal);
    let n_frames = dataset.n_frames();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = NeuralField::init(cfg.field_config(n_frames), &mut rng)?;
    let mut adam = FieldAdam::new(&field);
    let workers: Mutex<Vec<Box<GradWorker>>> = Mutex::new(Vec::new());

    // Per-frame proxy bounding boxes for ray culling.
    let frame_bounds: Vec<Aabb> = dataset.seq.frames.iter().map(|f| f.bounds()).collect();

    // Training pixel pools: the dilated mask region per (train cam, frame),
    // plus everything else as the exterior pool for mask supervision.
    let train_cams = dataset.train_camera_indices();
    let mut interior: Vec<PoolEntry> = Vec::new();
    let mut exterior: Vec<PoolEntry> = Vec::new();
    for &ci in &train_cams {
        let cam = &dataset.cameras[ci];
        let (w, h) = (cam.width as usize, cam.height as usize);
        for frame in 0..n_frames {
            let dilated = dilate_mask(dataset.mask(ci, frame), w, h, cfg.mask_dilation as usize);
            for py in 0..h {
                for px in 0..w {
                    let entry = PoolEntry {
                        cam: ci as u32,
                        frame: frame as u32,
                        px: px as u32,
                        py: py as u32,
                    };
                    if dilated[py * w + px] {
                        interior.push(entry);
                    } else {
                        exterior.push(entry);
                    }
                }
            }
        }
    }
    if interior.is_empty() {
        return Err(TrainError::Preflight("all training masks are empty".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .expect("thread pool");

    let geom = GeometryContext::new(&queries, squash, normalizer);
    let mut log = Vec::with_capacity(cfg.iters as usize);
    let mut eval_log = Vec::new();

    let n_ext = ((cfg.batch_rays as f64 * cfg.exterior_fraction).round() as usize)
        .min(cfg.batch_rays)
        .min(if exterior.is_empty() { 0 } else { usize::MAX });
    let n_int = cfg.batch_rays - n_ext;

    for iter in 0..cfg.iters {
        let lr = lr_schedule(cfg.lr_start, cfg.lr_end, iter, cfg.iters);
        // Sequential draws keep the batch independent of the worker count.
        let mut batch: Vec<PoolEntry> = Vec::with_capacity(cfg.batch_rays);
        for _ in 0..n_int {
            batch.push(interior[rng.random_range(0..interior.len())]);
        }
        for _ in 0..n_ext {
            batch.push(exterior[rng.random_range(0..exterior.len())]);
        }
        let jitter: Vec<f64> = (0..cfg.batch_rays * cfg.n_samples)
            .map(|_| rng.random())
            .collect();

        // Nominal sample count |X|: culled rays contribute no samples.
        let mut total_samples = 0usize;
        for entry in &batch {
            let cam = &dataset.cameras[entry.cam as usize];
            let ray = cam.ray_for_pixel(entry.px as f64, entry.py as f64);
            if ray_proxy_interval(&ray, &frame_bounds[entry.frame as usize], shell, cam.near, cam.far)
                .is_some()
            {
                total_samples += cfg.n_samples;
            }
        }
        let inv_rays = 1.0 / cfg.batch_rays as f64;
        let inv_samples = if total_samples > 0 {
            1.0 / total_samples as f64
        } else {
            0.0
        };
        let lambda = weights.lambda(iter);

        let sums: Vec<ChunkSums> = pool.install(|| {
            batch
                .par_chunks(CHUNK_RAYS)
                .enumerate()
                .map(|(chunk_idx, rays)| {
                    let mut worker = workers
                        .lock()
                        .unwrap()
                        .pop()
                        .unwrap_or_else(|| Box::new(GradWorker::new(&field, cfg.n_samples)));
                    let out = process_chunk(
                        rays,
                        chunk_idx,
                        dataset,
                        &field,
                        &geom,
                        &frame_bounds,
                        cfg,
                        &weights,
                        lambda,
                        shell,
                        inv_rays,
                        inv_samples,
                        &jitter,
                        &mut worker,
                    );
                    workers.lock().unwrap().push(worker);
                    out
                })
                .collect()
        });

        // Loss sums reduce in chunk order, so logs do not depend on the
        // worker count. Gradients stay distributed across worker buffers and
        // are summed as the optimizer reads them.
        let mut total_sums = ChunkSums::default();
        for s in &sums {
            total_sums.rgb += s.rgb;
            total_sums.mask += s.mask;
            total_sums.dist += s.dist;
            total_sums.dfm += s.dfm;
        }
        let l_rgb = total_sums.rgb * inv_rays;
        let l_mask = total_sums.mask * inv_rays;
        let l_dist = total_sums.dist * inv_samples;
        let l_dfm = total_sums.dfm * inv_samples;
        let total = total_loss(l_rgb, l_mask, l_dist, l_dfm, &weights, iter);
        if !total.is_finite() {
            return Err(TrainError::NonFinite {
                iter,
                l_rgb,
                l_mask,
                l_dist,
                l_dfm,
                batch: batch
                    .iter()
                    .map(|e| (e.cam, e.frame, e.px, e.py))
                    .collect(),
            });
        }

        {
            let mut guard = workers.lock().unwrap();
            let source = SummedGrads {
                workers: guard.iter().map(|w| &w.grads).collect(),
            };
            adam.step(&mut field, &source, lr)?;
            drop(source);
            for w in guard.iter_mut() {
                w.grads.clear();
            }
        }
        log.push(LossRow {
            iter,
            l_rgb,
            l_mask,
            l_dist,
            l_dfm,
            lr,
        });

        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            let renders = pool.install(|| {
                held_out_renders(dataset, &field, &geom, &frame_bounds, shell, cfg)
            });
            let mut total = 0.0;
            let mut count = 0;
            for (cam_id, frame, image, psnr) in &renders {
                eval_sink(iter + 1, *cam_id, *frame, image);
                if psnr.is_finite() {
                    total += psnr;
                    count += 1;
                }
            }
            eval_log.push(EvalRow {
                iter: iter + 1,
                mean_psnr: if count > 0 { total / count as f64 } else { f64::NAN },
            });
        }
    }

    Ok(Trained {
        field,
        adam,
        iteration: cfg.iters,
        weights,
        squash,
        normalizer,
        shell,
        log,
        eval_log,
    })
}

#[allow(clippy::too_many_arguments)]
fn process_chunk(
    rays: &[PoolEntry],
    chunk_idx: usize,
    dataset: &Dataset,
    field: &NeuralField,
    geom: &GeometryContext,
    frame_bounds: &[Aabb],
    cfg: &TrainConfig,
    weights: &LossWeights,
    lambda: f64,
    shell: f64,
    inv_rays: f64,
    inv_samples: f64,
    jitter: &[f64],
    worker: &mut GradWorker,
) -> ChunkSums {
    let mut sums = ChunkSums::default();
    let dim = field.dim();

    for (ri, entry) in rays.iter().enumerate() {
        let ray_index = chunk_idx * CHUNK_RAYS + ri;
        let ci = entry.cam as usize;
        let frame = entry.frame as usize;
        let cam = &dataset.cameras[ci];
        let ray = cam.ray_for_pixel(entry.px as f64, entry.py as f64);
        let target = dataset.image(ci, frame).at(entry.px, entry.py);
        let mask_bit =
            dataset.mask(ci, frame)[(entry.py * cam.width + entry.px) as usize];

        let interval = ray_proxy_interval(&ray, &frame_bounds[frame], shell, cam.near, cam.far);
        let Some(interval) = interval else {
            // Culled ray: composites to black with zero weight.
            let res = (target[0] * target[0] + target[1] * target[1] + target[2] * target[2]).sqrt();
            sums.rgb += res;
            sums.mask += if mask_bit { 1.0 } else { 0.0 };
            continue;
        };

        let jit = &jitter[ray_index * cfg.n_samples..(ray_index + 1) * cfg.n_samples];
        let samples = sample_points(interval, cfg.n_samples, Some(jit));

        // Forward march with lazy early termination.
        let mut used = 0;
        let mut transmittance = 1.0;
        for i in 0..cfg.n_samples {
            if transmittance <= cfg.t_floor {
                break;
            }
            let x = samples.position(&ray, i);
            let intrinsic = geom.intrinsic(x, frame, field.cfg.coord);
            field.forward_sample(intrinsic.coord.as_slice(), frame, &mut worker.states[i]);
            worker.sigmas[i] = worker.states[i].sigma;
            worker.colors[i] = worker.states[i].color;
            worker.sds[i] = intrinsic.signed_distance;
            transmittance *= (-worker.states[i].sigma * samples.spacings[i]).exp();
            used += 1;
        }

        let pixel = crate::renderer::composite(
            &worker.sigmas[..used],
            &worker.colors[..used],
            &samples.spacings[..used],
        );
        let res = [
            pixel.color[0] - target[0],
            pixel.color[1] - target[1],
            pixel.color[2] - target[2],
        ];
        let res_norm = (res[0] * res[0] + res[1] * res[1] + res[2] * res[2]).sqrt();
        sums.rgb += res_norm;
        sums.mask += if mask_bit {
            1.0 - pixel.weight
        } else {
            pixel.weight
        };

        // Upstream gradients on the composited color and weight sum.
        let d_color_up = if res_norm > 1e-15 {
            [
                res[0] / res_norm * inv_rays,
                res[1] / res_norm * inv_rays,
                res[2] / res_norm * inv_rays,
            ]
        } else {
            [0.0; 3]
        };
        let d_weight_up =
            lambda * weights.lambda_mask * (if mask_bit { -1.0 } else { 1.0 }) * inv_rays;

        composite_backward(
            &worker.sigmas[..used],
            &worker.colors[..used],
            &samples.spacings[..used],
            d_color_up,
            d_weight_up,
            &mut worker.d_sigmas[..used],
            &mut worker.d_colors[..used],
        );

        let mut d_delta_extra = [0.0; 4];
        for i in 0..used {
            // Distance loss: direct penalty on each sample's density.
            let dist_w = (worker.sds[i].max(0.0) * weights.beta).exp();
            sums.dist += worker.sigmas[i] * dist_w;
            worker.d_sigmas[i] += lambda * weights.lambda_dist * dist_w * inv_samples;

            // Offset regularization on the raw offsets.
            if field.cfg.offsets_enabled {
                let delta = &worker.states[i].delta[..dim];
                let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                sums.dfm += norm;
                if norm > 1e-15 {
                    let scale = lambda * weights.lambda_dfm * inv_samples / norm;
                    for a in 0..dim {
                        d_delta_extra[a] = delta[a] * scale;
                    }
                } else {
                    d_delta_extra = [0.0; 4];
                }
            }

            let (state, grads) = (&worker.states[i], &mut worker.grads);
            field.backward_sample(
                state,
                worker.d_sigmas[i],
                worker.d_colors[i],
                &d_delta_extra,
                &mut grads.tables,
                &mut grads.dense,
                &mut worker.scratch,
            );
        }
    }
    sums
}

/// Held-out renders on a frame subset with their mask-box PSNRs.
fn held_out_renders(
    dataset: &Dataset,
    field: &NeuralField,
    geom: &GeometryContext,
    frame_bounds: &[Aabb],
    shell: f64,
    cfg: &TrainConfig,
) -> Vec<(u32, usize, Rgb64, f64)> {
    let eval_cams = dataset.eval_camera_indices();
    let scene = NeuralFieldScene {
        field,
        geom: GeometryContext::new(geom.queries, geom.squash, geom.normalizer),
    };
    let opts = RenderOptions {
        n_samples: cfg.n_samples,
        shell,
        t_floor: cfg.t_floor,
    };
    let stride = cfg.eval_frame_stride.max(1);
    let mut out = Vec::new();
    for &ci in &eval_cams {
        let cam = &dataset.cameras[ci];
        for frame in (0..dataset.n_frames()).step_by(stride) {
            let (color, _) = crate::renderer::render_image(cam, frame, &scene, &frame_bounds[frame], &opts);
            let rendered = Rgb64::from_pixels(cam.width, cam.height, color);
            let gt = dataset.image(ci, frame);
            let bbox = PixelBox::of_mask(cam.width, cam.height, dataset.mask(ci, frame));
            let psnr = metrics::psnr(&rendered, gt, bbox.as_ref()).unwrap_or(f64::NAN);
            out.push((cam.id, frame, rendered, psnr));
        }
    }
    out
}

/// Renders the loss log as the CSV the CLI writes.
pub fn log_to_csv(log: &[LossRow]) -> String {
    let mut out = String::from("iter,l_rgb,l_mask,l_dist,l_dfm,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iter, row.l_rgb, row.l_mask, row.l_dist, row.l_dfm, row.lr
        ));
    }
    out
}
