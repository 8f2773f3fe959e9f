//! Command-line entry points: dataset generation, training, rendering,
//! evaluation, shape editing, and encoder debugging.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
//! failure (non-finite loss).

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use uvdnerf::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use uvdnerf::config::RunConfig;
use uvdnerf::dataset::{build_dataset, export_dataset, import_dataset, Dataset};
use uvdnerf::field::GeometryContext;
use uvdnerf::img::{self, PixelBox, Rgb64};
use uvdnerf::intrinsic::{IntrinsicCoord, SequenceQueries};
use uvdnerf::mesh::{parse_obj, validate_sequence, TriangleMesh};
use uvdnerf::metrics;
use uvdnerf::renderer::{render_image, NeuralFieldScene, RenderOptions};
use uvdnerf::synth::generate_scene;
use uvdnerf::training::{log_to_csv, train_with_eval_sink, TrainError};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "uvdnerf",
    about = "Hash-encoded radiance fields over mesh-intrinsic UV-D coordinates",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (proxies, cameras, images, masks).
    Gen {
        /// Scene spec file (flat key = value; scene.* keys).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a field on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Config file (flat key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set iters=N`.
        #[arg(long)]
        iters: Option<u64>,
        /// Shorthand for `--set seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for `--set threads=N` (1 = deterministic).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Render frames from a checkpoint through a dataset camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Camera id from cameras.json.
        #[arg(long)]
        camera: u32,
        /// Frame range `a..b` (half-open) or a single frame index.
        #[arg(long)]
        frames: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// PSNR/SSIM of a checkpoint against a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Which cameras to score: `eval` or `train`.
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render with replacement proxy geometry (shape editing).
    EditShape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory of replacement meshes frame_0000.obj, ...
        #[arg(long)]
        proxies: PathBuf,
        #[arg(long)]
        camera: u32,
        #[arg(long)]
        frames: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Visualize the learned grid: evaluate the radiance field over (u, v)
    /// at a fixed squashed distance, or composite along it.
    DebugEncode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed squashed-distance coordinate of the slice.
        #[arg(long, default_value_t = 0.5)]
        slice: f64,
        /// Output image resolution.
        #[arg(long, default_value_t = 256)]
        res: u32,
        /// `slice` or `composite`.
        #[arg(long, default_value = "slice")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen { spec, out, set } => cmd_gen(spec.as_deref(), &out, &set),
        Cmd::Train {
            dataset,
            config,
            out,
            mut set,
            iters,
            seed,
            threads,
        } => {
            if let Some(v) = iters {
                set.push(format!("iters={v}"));
            }
            if let Some(v) = seed {
                set.push(format!("seed={v}"));
            }
            if let Some(v) = threads {
                set.push(format!("threads={v}"));
            }
            cmd_train(&dataset, config.as_deref(), &out, &set)
        }
        Cmd::Render {
            checkpoint,
            dataset,
            camera,
            frames,
            out,
            set,
        } => cmd_render(&checkpoint, &dataset, camera, &frames, &out, &set, None),
        Cmd::Eval {
            checkpoint,
            dataset,
            split,
            out,
            set,
        } => cmd_eval(&checkpoint, &dataset, &split, &out, &set),
        Cmd::EditShape {
            checkpoint,
            dataset,
            proxies,
            camera,
            frames,
            out,
            set,
        } => cmd_render(&checkpoint, &dataset, camera, &frames, &out, &set, Some(&proxies)),
        Cmd::DebugEncode {
            checkpoint,
            slice,
            res,
            mode,
            out,
            set,
        } => cmd_debug_encode(&checkpoint, slice, res, &mode, &out, &set),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Resolves the run config: defaults, then an optional file, then overrides.
fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    for item in sets {
        let Some(eq) = item.find('=') else {
            return Err(CliError::usage(format!("--set expects key=value, got `{item}`")));
        };
        cfg.set(item[..eq].trim(), item[eq + 1..].trim(), 0)
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(cfg)
}

/// Every command echoes the fully resolved config into its output directory.
fn write_echo(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(out.join("config_resolved.cfg"), cfg.echo())
        .map_err(|e| CliError::data(format!("cannot write config echo: {e}")))?;
    Ok(())
}

fn cmd_gen(spec: Option<&Path>, out: &Path, sets: &[String]) -> CliResult {
    let cfg = resolve_config(spec, sets)?;
    let scene = generate_scene(&cfg.scene).map_err(|e| CliError::usage(e.to_string()))?;
    write_echo(out, &cfg)?;
    let ds = build_dataset(&scene, out);
    export_dataset(&ds).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "generated {} frames x {} cameras at {}x{} into {}",
        ds.n_frames(),
        ds.cameras.len(),
        cfg.scene.rig.image_size,
        cfg.scene.rig.image_size,
        out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    import_dataset(path).map_err(|e| CliError::data(e.to_string()))
}

fn cmd_train(dataset_dir: &Path, config: Option<&Path>, out: &Path, sets: &[String]) -> CliResult {
    let cfg = resolve_config(config, sets)?;
    let dataset = load_dataset(dataset_dir)?;
    write_echo(out, &cfg)?;
    let renders_dir = out.join("renders");
    let mut sink = |iter: u64, cam_id: u32, frame: usize, image: &Rgb64| {
        let _ = std::fs::create_dir_all(&renders_dir);
        let path = renders_dir.join(format!("iter_{iter:06}_cam{cam_id:02}_frame_{frame:04}.png"));
        let _ = img::save_rgb_png(&path, image);
    };
    let trained = match train_with_eval_sink(&dataset, &cfg.train, &mut sink) {
        Ok(t) => t,
        Err(TrainError::NonFinite {
            iter,
            l_rgb,
            l_mask,
            l_dist,
            l_dfm,
            batch,
        }) => {
            let mut dump = format!(
                "# non-finite loss at iteration {iter}\n# l_rgb={l_rgb} l_mask={l_mask} l_dist={l_dist} l_dfm={l_dfm}\ncam,frame,px,py\n"
            );
            for (c, f, x, y) in batch {
                dump.push_str(&format!("{c},{f},{x},{y}\n"));
            }
            let _ = std::fs::write(out.join("diagnostic_batch.csv"), dump);
            return Err(CliError::numeric(format!(
                "non-finite loss at iteration {iter}; offending batch dumped to {}",
                out.join("diagnostic_batch.csv").display()
            )));
        }
        Err(TrainError::Preflight(msg)) => return Err(CliError::data(msg)),
        Err(e) => return Err(CliError::data(e.to_string())),
    };

    std::fs::write(out.join("loss_log.csv"), log_to_csv(&trained.log))
        .map_err(|e| CliError::data(format!("cannot write loss log: {e}")))?;
    let mut eval_csv = String::from("iter,mean_psnr\n");
    for row in &trained.eval_log {
        eval_csv.push_str(&format!("{},{}\n", row.iter, row.mean_psnr));
    }
    std::fs::write(out.join("eval_log.csv"), eval_csv)
        .map_err(|e| CliError::data(format!("cannot write eval log: {e}")))?;

    let ckpt = Checkpoint {
        field: trained.field,
        adam: trained.adam,
        iteration: trained.iteration,
        weights: trained.weights,
        squash: trained.squash,
        normalizer: trained.normalizer,
        shell: trained.shell,
        n_samples: cfg.render_samples,
        config_echo: cfg.echo(),
    };
    let ckpt_path = out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &ckpt).map_err(|e| CliError::data(e.to_string()))?;
    if let Some(last) = trained.log.last() {
        println!(
            "trained {} iterations; final losses rgb={:.5} mask={:.5} dist={:.5} dfm={:.5}",
            trained.iteration, last.l_rgb, last.l_mask, last.l_dist, last.l_dfm
        );
    } else {
        println!("trained 0 iterations (checkpoint is the initialization)");
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn parse_frames(spec: &str, n_frames: usize) -> Result<std::ops::Range<usize>, CliError> {
    let range = if let Some((a, b)) = spec.split_once("..") {
        let start: usize = a
            .parse()
            .map_err(|_| CliError::usage(format!("bad frame range `{spec}`")))?;
        let end: usize = b
            .parse()
            .map_err(|_| CliError::usage(format!("bad frame range `{spec}`")))?;
        start..end
    } else {
        let f: usize = spec
            .parse()
            .map_err(|_| CliError::usage(format!("bad frame index `{spec}`")))?;
        f..f + 1
    };
    if range.is_empty() || range.end > n_frames {
        return Err(CliError::data(format!(
            "frame range {spec} out of bounds (dataset has {n_frames} frames)"
        )));
    }
    Ok(range)
}

/// Loads replacement proxies frame_0000.obj.. from a directory.
fn load_proxy_dir(dir: &Path) -> Result<Vec<TriangleMesh>, CliError> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(uvdnerf::dataset::mesh_filename(frames.len()));
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        frames.push(
            parse_obj(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?,
        );
    }
    if frames.is_empty() {
        return Err(CliError::data(format!(
            "no frame_0000.obj found in {}",
            dir.display()
        )));
    }
    Ok(frames)
}

/// Shared implementation of `render` and `edit-shape`: the latter swaps in a
/// replacement proxy sequence after validating it against the original.
fn cmd_render(
    checkpoint: &Path,
    dataset_dir: &Path,
    camera: u32,
    frames: &str,
    out: &Path,
    sets: &[String],
    replacement_proxies: Option<&Path>,
) -> CliResult {
    let mut cfg = resolve_config(None, sets)?;
    let ckpt = load_checkpoint(checkpoint).map_err(|e| CliError::data(e.to_string()))?;
    let dataset = load_dataset(dataset_dir)?;
    let cam_index = dataset
        .camera_index(camera)
        .ok_or_else(|| CliError::data(format!("unknown camera id {camera}")))?;
    if !sets.iter().any(|s| s.starts_with("render_samples")) {
        cfg.render_samples = ckpt.n_samples;
    }
    write_echo(out, &cfg)?;

    let seq = match replacement_proxies {
        None => dataset.seq.clone(),
        Some(dir) => {
            let replacement = load_proxy_dir(dir)?;
            // The replacement must share topology and atlas with the
            // original; validating the concatenation checks exactly that.
            let mut combined = vec![dataset.seq.template().clone()];
            combined.extend(replacement.iter().cloned());
            validate_sequence(combined).map_err(|e| CliError::data(e.to_string()))?;
            validate_sequence(replacement).map_err(|e| CliError::data(e.to_string()))?
        }
    };
    let n_frames = seq.len().min(ckpt.field.cfg.n_frames);
    let range = parse_frames(frames, n_frames)?;

    let queries = SequenceQueries::new(seq);
    let geom = GeometryContext::new(&queries, ckpt.squash, ckpt.normalizer);
    let scene = NeuralFieldScene {
        field: &ckpt.field,
        geom,
    };
    let cam = &dataset.cameras[cam_index];
    let opts = RenderOptions {
        n_samples: cfg.render_samples,
        shell: ckpt.shell,
        t_floor: 0.0,
    };
    for frame in range {
        let bounds = queries.seq.frames[frame].bounds();
        let (color, weight) = render_image(cam, frame, &scene, &bounds, &opts);
        let image = Rgb64::from_pixels(cam.width, cam.height, color);
        let img_path = out.join(format!("frame_{frame:04}.png"));
        img::save_rgb_png(&img_path, &image).map_err(|e| CliError::data(e.to_string()))?;
        let weight_path = out.join(format!("weight_{frame:04}.png"));
        img::save_gray_png(&weight_path, cam.width, cam.height, &weight)
            .map_err(|e| CliError::data(e.to_string()))?;
        // When rendering original proxies against a dataset view, report the
        // PSNR against the stored image.
        if replacement_proxies.is_none() {
            let gt = dataset.image(cam_index, frame);
            let bbox = PixelBox::of_mask(cam.width, cam.height, dataset.mask(cam_index, frame));
            if let Ok(p) = metrics::psnr(&image, gt, bbox.as_ref()) {
                println!("frame {frame}: psnr {p:.2} dB -> {}", img_path.display());
            }
        } else {
            println!("frame {frame}: -> {}", img_path.display());
        }
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: &str,
    out: &Path,
    sets: &[String],
) -> CliResult {
    let mut cfg = resolve_config(None, sets)?;
    let ckpt = load_checkpoint(checkpoint).map_err(|e| CliError::data(e.to_string()))?;
    let dataset = load_dataset(dataset_dir)?;
    if !sets.iter().any(|s| s.starts_with("render_samples")) {
        cfg.render_samples = ckpt.n_samples;
    }
    write_echo(out, &cfg)?;
    let cam_indices = match split {
        "eval" => dataset.eval_camera_indices(),
        "train" => dataset.train_camera_indices(),
        other => return Err(CliError::usage(format!("unknown split `{other}`"))),
    };
    if cam_indices.is_empty() {
        return Err(CliError::data(format!("split `{split}` has no cameras")));
    }

    let queries = SequenceQueries::new(dataset.seq.clone());
    let geom = GeometryContext::new(&queries, ckpt.squash, ckpt.normalizer);
    let scene = NeuralFieldScene {
        field: &ckpt.field,
        geom,
    };
    let opts = RenderOptions {
        n_samples: cfg.render_samples,
        shell: ckpt.shell,
        t_floor: 0.0,
    };
    // Metrics are restricted to the per-image bounding box of the input mask.
    let mut csv = String::from("frame,cam,psnr,ssim\n");
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    let mut count = 0usize;
    for frame in 0..dataset.n_frames() {
        for &ci in &cam_indices {
            let cam = &dataset.cameras[ci];
            let bounds = queries.seq.frames[frame].bounds();
            let (color, _) = render_image(cam, frame, &scene, &bounds, &opts);
            let image = Rgb64::from_pixels(cam.width, cam.height, color);
            let gt = dataset.image(ci, frame);
            let bbox = PixelBox::of_mask(cam.width, cam.height, dataset.mask(ci, frame))
                .unwrap_or_else(|| PixelBox::full(cam.width, cam.height));
            let psnr =
                metrics::psnr(&image, gt, Some(&bbox)).map_err(|e| CliError::data(e.to_string()))?;
            let ssim_box = grow_for_ssim(&bbox, cam.width, cam.height);
            let ssim = metrics::ssim(&image.crop(&ssim_box), &gt.crop(&ssim_box))
                .map_err(|e| CliError::data(e.to_string()))?;
            csv.push_str(&format!("{frame},{},{psnr},{ssim}\n", cam.id));
            sum_psnr += psnr;
            sum_ssim += ssim;
            count += 1;
        }
    }
    std::fs::write(out.join("metrics.csv"), csv)
        .map_err(|e| CliError::data(format!("cannot write metrics: {e}")))?;
    println!(
        "{} views: mean psnr {:.3} dB, mean ssim {:.4} (per-image mask bounding boxes)",
        count,
        sum_psnr / count as f64,
        sum_ssim / count as f64
    );
    Ok(())
}

/// The SSIM window needs at least 11x11 pixels; grow the mask box if needed.
fn grow_for_ssim(bbox: &PixelBox, width: u32, height: u32) -> PixelBox {
    let mut b = *bbox;
    while b.width() < metrics::SSIM_WINDOW as u32 && (b.x0 > 0 || b.x1 < width) {
        b.x0 = b.x0.saturating_sub(1);
        b.x1 = (b.x1 + 1).min(width);
    }
    while b.height() < metrics::SSIM_WINDOW as u32 && (b.y0 > 0 || b.y1 < height) {
        b.y0 = b.y0.saturating_sub(1);
        b.y1 = (b.y1 + 1).min(height);
    }
    b
}

fn cmd_debug_encode(
    checkpoint: &Path,
    slice: f64,
    res: u32,
    mode: &str,
    out: &Path,
    sets: &[String],
) -> CliResult {
    let cfg = resolve_config(None, sets)?;
    let ckpt = load_checkpoint(checkpoint).map_err(|e| CliError::data(e.to_string()))?;
    let out_dir = out.parent().unwrap_or(Path::new("."));
    write_echo(out_dir, &cfg)?;
    let s = if (0.0..=1.0).contains(&slice) {
        slice
    } else {
        let clamped = slice.clamp(0.0, 1.0);
        eprintln!("warning: slice {slice} outside [0,1], clamped to {clamped}");
        clamped
    };
    let field = &ckpt.field;
    let dim = field.dim();
    let mut image = Rgb64::new(res, res);
    for py in 0..res {
        for px in 0..res {
            let u = (px as f64 + 0.5) / res as f64;
            let v = (py as f64 + 0.5) / res as f64;
            let color = match mode {
                "slice" => {
                    let r = if dim == 3 {
                        IntrinsicCoord::uvd(u, v, s)
                    } else {
                        IntrinsicCoord::xyzd(u, v, 0.5, s)
                    };
                    field.radiance_field(&r).color
                }
                "composite" => {
                    // March the distance axis through the unit grid.
                    let n = 64;
                    let delta = 1.0 / n as f64;
                    let mut c = [0.0; 3];
                    let mut trans: f64 = 1.0;
                    for i in 0..n {
                        let si = (i as f64 + 0.5) * delta;
                        let r = if dim == 3 {
                            IntrinsicCoord::uvd(u, v, si)
                        } else {
                            IntrinsicCoord::xyzd(u, v, 0.5, si)
                        };
                        let o = field.radiance_field(&r);
                        let alpha = 1.0 - (-o.density * delta).exp();
                        for k in 0..3 {
                            c[k] += trans * alpha * o.color[k];
                        }
                        trans *= 1.0 - alpha;
                        if trans < 1e-7 {
                            break;
                        }
                    }
                    c
                }
                other => return Err(CliError::usage(format!("unknown mode `{other}`"))),
            };
            image.set(px, py, color);
        }
    }
    img::save_rgb_png(out, &image).map_err(|e| CliError::data(e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}
