//! The flat key/value run configuration: one declarative document holding
//! every tunable of the pipeline. Unknown keys are rejected; the resolved
//! config (defaults filled in) is echoed verbatim into each run's output
//! directory, and re-parsing that echo reproduces the run.
//!
//! Syntax: one `key = value` per line; `#` starts a comment; blank lines are
//! ignored. Vector values are comma-separated (`light = 0.5,0.6,0.45`).

use crate::encoding::IndexingMode;
use crate::field::CoordKind;
use crate::geom::{vec3, Vec3};
use crate::synth::SceneSpec;
use crate::training::TrainConfig;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
}

/// All tunables: training hyperparameters, model shape, scene generation and
/// render defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    /// Samples per ray for offline rendering.
    pub render_samples: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            render_samples: 64,
        }
    }
}

fn parse_vec3(value: &str) -> Result<Vec3, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated numbers".into());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse::<f64>().map_err(|e| e.to_string())?;
    }
    Ok(vec3(out[0], out[1], out[2]))
}

fn parse_rgb(value: &str) -> Result<[f64; 3], String> {
    parse_vec3(value).map(|v| v.to_array())
}

fn fmt_vec3(v: Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn fmt_rgb(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        macro_rules! parse {
            ($ty:ty) => {
                value.trim().parse::<$ty>().map_err(|e| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?
            };
        }
        macro_rules! parse_with {
            ($f:expr) => {
                $f(value.trim()).map_err(|reason| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                    reason,
                })?
            };
        }
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "seed" => t.seed = parse!(u64),
            "iters" => t.iters = parse!(u64),
            "batch_rays" => t.batch_rays = parse!(usize),
            "n_samples" => t.n_samples = parse!(usize),
            "lr_start" => t.lr_start = parse!(f64),
            "lr_end" => t.lr_end = parse!(f64),
            "lambda_mask" => t.lambda_mask = parse!(f64),
            "lambda_dist" => t.lambda_dist = parse!(f64),
            "lambda_dfm" => t.lambda_dfm = parse!(f64),
            "beta_over_diag" => t.beta_over_diag = parse!(f64),
            "squash_over_diag" => t.squash_over_diag = parse!(f64),
            "shell_frac" => t.shell_frac = parse!(f64),
            "phase_switch_iter" => t.phase_switch_iter = parse!(u64),
            "lambda_late" => t.lambda_late = parse!(f64),
            "exterior_fraction" => t.exterior_fraction = parse!(f64),
            "mask_dilation" => t.mask_dilation = parse!(u32),
            "threads" => t.threads = parse!(usize),
            "eval_every" => t.eval_every = parse!(u64),
            "eval_frame_stride" => t.eval_frame_stride = parse!(usize),
            "t_floor" => t.t_floor = parse!(f64),
            "coord" => {
                t.coord = match value.trim() {
                    "uvd" => CoordKind::UvD,
                    "xyzd" => CoordKind::XyzD,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.into(),
                            value: other.into(),
                            reason: "expected `uvd` or `xyzd`".into(),
                        })
                    }
                }
            }
            "offsets_enabled" => t.offsets_enabled = parse!(bool),
            "indexing" => {
                t.indexing = match value.trim() {
                    "hash" => IndexingMode::HashedAuto,
                    "dense" => IndexingMode::DenseForced,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.into(),
                            value: other.into(),
                            reason: "expected `hash` or `dense`".into(),
                        })
                    }
                }
            }
            "hash.levels" => t.hash.levels = parse!(usize),
            "hash.table_size_log2" => {
                let log2: u32 = parse!(u32);
                t.hash.table_size = 1usize << log2;
            }
            "hash.feature_dim" => t.hash.feature_dim = parse!(usize),
            "hash.n_min" => t.hash.n_min = parse!(u32),
            "hash.n_max" => t.hash.n_max = parse!(u32),
            "offset_hash.levels" => t.offset_hash.levels = parse!(usize),
            "offset_hash.table_size_log2" => {
                let log2: u32 = parse!(u32);
                t.offset_hash.table_size = 1usize << log2;
            }
            "offset_hash.feature_dim" => t.offset_hash.feature_dim = parse!(usize),
            "offset_hash.n_min" => t.offset_hash.n_min = parse!(u32),
            "offset_hash.n_max" => t.offset_hash.n_max = parse!(u32),
            "hidden_dim" => t.hidden_dim = parse!(usize),
            "hidden_layers" => t.hidden_layers = parse!(usize),
            "latent_dim" => t.latent_dim = parse!(usize),
            "offset_scale" => t.offset_scale = parse!(f64),
            "table_init_scale" => t.table_init_scale = parse!(f64),
            "render_samples" => self.render_samples = parse!(usize),
            "scene.rings" => s.rings = parse!(usize),
            "scene.segments" => s.segments = parse!(usize),
            "scene.radius" => s.radius = parse!(f64),
            "scene.frames" => s.n_frames = parse!(usize),
            "scene.rot_axis" => s.rot_axis = parse_with!(parse_vec3),
            "scene.rot_total" => s.rot_total = parse!(f64),
            "scene.scale_axis" => s.scale_axis = parse!(usize),
            "scene.scale_total" => s.scale_total = parse!(f64),
            "scene.translate_total" => s.translate_total = parse_with!(parse_vec3),
            "scene.bump_amplitude" => s.bump_amplitude = parse!(f64),
            "scene.bump_freq" => s.bump_freq = parse!(u32),
            "scene.bump_travel" => s.bump_travel = parse!(f64),
            "scene.checker_freq" => s.texture.checker_freq = parse!(u32),
            "scene.edge_width" => s.texture.edge_width = parse!(f64),
            "scene.color_a" => s.texture.color_a = parse_with!(parse_rgb),
            "scene.color_b" => s.texture.color_b = parse_with!(parse_rgb),
            "scene.gradient" => s.texture.gradient = parse!(f64),
            "scene.light_dir" => s.light_dir = parse_with!(parse_vec3),
            "scene.ambient" => s.ambient = parse!(f64),
            "scene.diffuse" => s.diffuse = parse!(f64),
            "scene.cameras" => s.rig.count = parse!(usize),
            "scene.orbit_radius" => s.rig.orbit_radius = parse!(f64),
            "scene.elevation" => s.rig.elevation = parse!(f64),
            "scene.image_size" => s.rig.image_size = parse!(u32),
            "scene.focal_rel" => s.rig.focal_rel = parse!(f64),
            "scene.eval_cams" => s.eval_cams = parse!(usize),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Applies a whole config document on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stripped = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let trimmed = stripped.trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some(eq) = trimmed.find('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.into(),
                });
            };
            let key = trimmed[..eq].trim();
            let value = trimmed[eq + 1..].trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.into(),
                });
            }
            self.set(key, value, line)?;
        }
        Ok(())
    }

    /// The full resolved document, every key in a fixed order. Floats are
    /// printed with the shortest representation that round-trips, so parsing
    /// the echo reproduces this config exactly.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let s = &self.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("iters", t.iters.to_string());
        kv("batch_rays", t.batch_rays.to_string());
        kv("n_samples", t.n_samples.to_string());
        kv("lr_start", t.lr_start.to_string());
        kv("lr_end", t.lr_end.to_string());
        kv("lambda_mask", t.lambda_mask.to_string());
        kv("lambda_dist", t.lambda_dist.to_string());
        kv("lambda_dfm", t.lambda_dfm.to_string());
        kv("beta_over_diag", t.beta_over_diag.to_string());
        kv("squash_over_diag", t.squash_over_diag.to_string());
        kv("shell_frac", t.shell_frac.to_string());
        kv("phase_switch_iter", t.phase_switch_iter.to_string());
        kv("lambda_late", t.lambda_late.to_string());
        kv("exterior_fraction", t.exterior_fraction.to_string());
        kv("mask_dilation", t.mask_dilation.to_string());
        kv("threads", t.threads.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("eval_frame_stride", t.eval_frame_stride.to_string());
        kv("t_floor", t.t_floor.to_string());
        kv(
            "coord",
            match t.coord {
                CoordKind::UvD => "uvd".into(),
                CoordKind::XyzD => "xyzd".into(),
            },
        );
        kv("offsets_enabled", t.offsets_enabled.to_string());
        kv(
            "indexing",
            match t.indexing {
                IndexingMode::HashedAuto => "hash".into(),
                IndexingMode::DenseForced => "dense".into(),
            },
        );
        kv("hash.levels", t.hash.levels.to_string());
        kv(
            "hash.table_size_log2",
            t.hash.table_size.trailing_zeros().to_string(),
        );
        kv("hash.feature_dim", t.hash.feature_dim.to_string());
        kv("hash.n_min", t.hash.n_min.to_string());
        kv("hash.n_max", t.hash.n_max.to_string());
        kv("offset_hash.levels", t.offset_hash.levels.to_string());
        kv(
            "offset_hash.table_size_log2",
            t.offset_hash.table_size.trailing_zeros().to_string(),
        );
        kv("offset_hash.feature_dim", t.offset_hash.feature_dim.to_string());
        kv("offset_hash.n_min", t.offset_hash.n_min.to_string());
        kv("offset_hash.n_max", t.offset_hash.n_max.to_string());
        kv("hidden_dim", t.hidden_dim.to_string());
        kv("hidden_layers", t.hidden_layers.to_string());
        kv("latent_dim", t.latent_dim.to_string());
        kv("offset_scale", t.offset_scale.to_string());
        kv("table_init_scale", t.table_init_scale.to_string());
        kv("render_samples", self.render_samples.to_string());
        kv("scene.rings", s.rings.to_string());
        kv("scene.segments", s.segments.to_string());
        kv("scene.radius", s.radius.to_string());
        kv("scene.frames", s.n_frames.to_string());
        kv("scene.rot_axis", fmt_vec3(s.rot_axis));
        kv("scene.rot_total", s.rot_total.to_string());
        kv("scene.scale_axis", s.scale_axis.to_string());
        kv("scene.scale_total", s.scale_total.to_string());
        kv("scene.translate_total", fmt_vec3(s.translate_total));
        kv("scene.bump_amplitude", s.bump_amplitude.to_string());
        kv("scene.bump_freq", s.bump_freq.to_string());
        kv("scene.bump_travel", s.bump_travel.to_string());
        kv("scene.checker_freq", s.texture.checker_freq.to_string());
        kv("scene.edge_width", s.texture.edge_width.to_string());
        kv("scene.color_a", fmt_rgb(s.texture.color_a));
        kv("scene.color_b", fmt_rgb(s.texture.color_b));
        kv("scene.gradient", s.texture.gradient.to_string());
        kv("scene.light_dir", fmt_vec3(s.light_dir));
        kv("scene.ambient", s.ambient.to_string());
        kv("scene.diffuse", s.diffuse.to_string());
        kv("scene.cameras", s.rig.count.to_string());
        kv("scene.orbit_radius", s.rig.orbit_radius.to_string());
        kv("scene.elevation", s.rig.elevation.to_string());
        kv("scene.image_size", s.rig.image_size.to_string());
        kv("scene.focal_rel", s.rig.focal_rel.to_string());
        kv("scene.eval_cams", s.eval_cams.to_string());
        out
    }
}
