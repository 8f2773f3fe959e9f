//! C ABI over the core pipeline: load datasets, train fields, render frames
//! and read metrics through opaque handles. All functions return an error
//! code (`UVD_OK` on success); the most recent failure message per thread is
//! available from `uvd_last_error_message`.

use libc::{c_char, c_double, c_int};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use uvdnerf::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use uvdnerf::config::RunConfig;
use uvdnerf::dataset::{import_dataset, Dataset};
use uvdnerf::field::GeometryContext;
use uvdnerf::img::{PixelBox, Rgb64};
use uvdnerf::intrinsic::SequenceQueries;
use uvdnerf::metrics;
use uvdnerf::renderer::{render_image, NeuralFieldScene, RenderOptions};
use uvdnerf::training::{train, TrainError};

pub const UVD_OK: c_int = 0;
pub const UVD_ERR_INTERNAL: c_int = 1;
pub const UVD_ERR_USAGE: c_int = 2;
pub const UVD_ERR_DATA: c_int = 3;
pub const UVD_ERR_NUMERIC: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(code: c_int, message: &str) -> c_int {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message.replace('\0', " ")).unwrap();
    });
    code
}

/// Message of the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uvd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn uvd_version() -> *const c_char {
    concat!("uvdnerf ", env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque dataset handle.
pub struct UvdDataset {
    inner: Dataset,
}

/// Opaque trained-model handle (a checkpoint in memory).
pub struct UvdModel {
    inner: Checkpoint,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, String> {
    if ptr.is_null() {
        return Err(format!("{what} is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| format!("{what} is not valid utf-8"))
}

/// Loads a dataset directory. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uvd_dataset_load(path: *const c_char) -> *mut UvdDataset {
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(e) => {
            set_error(UVD_ERR_USAGE, &e);
            return std::ptr::null_mut();
        }
    };
    match import_dataset(Path::new(path)) {
        Ok(inner) => Box::into_raw(Box::new(UvdDataset { inner })),
        Err(e) => {
            set_error(UVD_ERR_DATA, &e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `ds` must be a pointer from `uvd_dataset_load` not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn uvd_dataset_free(ds: *mut UvdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Frame and camera counts of a dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; out pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn uvd_dataset_info(
    ds: *const UvdDataset,
    n_frames: *mut u32,
    n_cameras: *mut u32,
    image_width: *mut u32,
    image_height: *mut u32,
) -> c_int {
    if ds.is_null() {
        return set_error(UVD_ERR_USAGE, "dataset handle is null");
    }
    let d = &(*ds).inner;
    if !n_frames.is_null() {
        *n_frames = d.n_frames() as u32;
    }
    if !n_cameras.is_null() {
        *n_cameras = d.cameras.len() as u32;
    }
    if let Some(cam) = d.cameras.first() {
        if !image_width.is_null() {
            *image_width = cam.width;
        }
        if !image_height.is_null() {
            *image_height = cam.height;
        }
    }
    UVD_OK
}

/// Trains a model on a dataset. `config_text` is the flat `key = value`
/// document (may be null for defaults). Returns null on failure.
///
/// # Safety
/// `ds` must be a live dataset handle; `config_text` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uvd_train(
    ds: *const UvdDataset,
    config_text: *const c_char,
) -> *mut UvdModel {
    if ds.is_null() {
        set_error(UVD_ERR_USAGE, "dataset handle is null");
        return std::ptr::null_mut();
    }
    let mut cfg = RunConfig::default();
    if !config_text.is_null() {
        let text = match cstr_arg(config_text, "config") {
            Ok(t) => t,
            Err(e) => {
                set_error(UVD_ERR_USAGE, &e);
                return std::ptr::null_mut();
            }
        };
        if let Err(e) = cfg.apply_text(text) {
            set_error(UVD_ERR_USAGE, &e.to_string());
            return std::ptr::null_mut();
        }
    }
    let dataset = &(*ds).inner;
    let result = catch_unwind(AssertUnwindSafe(|| train(dataset, &cfg.train)));
    match result {
        Ok(Ok(trained)) => {
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
            Box::into_raw(Box::new(UvdModel { inner: ckpt }))
        }
        Ok(Err(e)) => {
            let code = match e {
                TrainError::NonFinite { .. } => UVD_ERR_NUMERIC,
                TrainError::Preflight(_) => UVD_ERR_DATA,
                _ => UVD_ERR_INTERNAL,
            };
            set_error(code, &e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error(UVD_ERR_INTERNAL, "panic during training");
            std::ptr::null_mut()
        }
    }
}

/// Loads a checkpoint file. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uvd_model_load(path: *const c_char) -> *mut UvdModel {
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(e) => {
            set_error(UVD_ERR_USAGE, &e);
            return std::ptr::null_mut();
        }
    };
    match load_checkpoint(Path::new(path)) {
        Ok(inner) => Box::into_raw(Box::new(UvdModel { inner })),
        Err(e) => {
            set_error(UVD_ERR_DATA, &e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Saves a model to a checkpoint file.
///
/// # Safety
/// `model` must be a live model handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uvd_model_save(model: *const UvdModel, path: *const c_char) -> c_int {
    if model.is_null() {
        return set_error(UVD_ERR_USAGE, "model handle is null");
    }
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(e) => return set_error(UVD_ERR_USAGE, &e),
    };
    match save_checkpoint(Path::new(path), &(*model).inner) {
        Ok(()) => UVD_OK,
        Err(e) => set_error(UVD_ERR_DATA, &e.to_string()),
    }
}

/// # Safety
/// `model` must be a pointer from `uvd_train`/`uvd_model_load` or null.
#[no_mangle]
pub unsafe extern "C" fn uvd_model_free(model: *mut UvdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Training iteration count stored in the model.
///
/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn uvd_model_iterations(model: *const UvdModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).inner.iteration
}

/// Renders one (camera, frame) view. `rgb_out` receives width*height*3
/// doubles in [0,1] row-major; `weight_out` (optional, may be null) receives
/// width*height accumulated opacities. `n_samples` 0 uses the model default.
///
/// # Safety
/// Handles must be live; `rgb_out` must point to width*height*3 doubles and
/// `weight_out`, when non-null, to width*height doubles.
#[no_mangle]
pub unsafe extern "C" fn uvd_render(
    model: *const UvdModel,
    ds: *const UvdDataset,
    camera_id: u32,
    frame: u32,
    n_samples: u32,
    rgb_out: *mut c_double,
    weight_out: *mut c_double,
) -> c_int {
    if model.is_null() || ds.is_null() {
        return set_error(UVD_ERR_USAGE, "null handle");
    }
    if rgb_out.is_null() {
        return set_error(UVD_ERR_USAGE, "rgb_out is null");
    }
    let ckpt = &(*model).inner;
    let dataset = &(*ds).inner;
    let Some(cam_index) = dataset.camera_index(camera_id) else {
        return set_error(UVD_ERR_DATA, &format!("unknown camera id {camera_id}"));
    };
    let frame = frame as usize;
    if frame >= dataset.n_frames() || frame >= ckpt.field.cfg.n_frames {
        return set_error(UVD_ERR_DATA, &format!("frame {frame} out of range"));
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let queries = SequenceQueries::new(dataset.seq.clone());
        let geom = GeometryContext::new(&queries, ckpt.squash, ckpt.normalizer);
        let scene = NeuralFieldScene {
            field: &ckpt.field,
            geom,
        };
        let cam = &dataset.cameras[cam_index];
        let opts = RenderOptions {
            n_samples: if n_samples == 0 {
                ckpt.n_samples
            } else {
                n_samples as usize
            },
            shell: ckpt.shell,
            t_floor: 0.0,
        };
        let bounds = queries.seq.frames[frame].bounds();
        render_image(cam, frame, &scene, &bounds, &opts)
    }));
    match result {
        Ok((color, weight)) => {
            let n = color.len();
            let out = std::slice::from_raw_parts_mut(rgb_out, n * 3);
            for (i, px) in color.iter().enumerate() {
                out[i * 3] = px[0];
                out[i * 3 + 1] = px[1];
                out[i * 3 + 2] = px[2];
            }
            if !weight_out.is_null() {
                let wout = std::slice::from_raw_parts_mut(weight_out, n);
                wout.copy_from_slice(&weight);
            }
            UVD_OK
        }
        Err(_) => set_error(UVD_ERR_INTERNAL, "panic during rendering"),
    }
}

/// PSNR of a rendered view against the dataset image, inside the mask's
/// bounding box.
///
/// # Safety
/// Handles must be live; `psnr_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uvd_eval_psnr(
    model: *const UvdModel,
    ds: *const UvdDataset,
    camera_id: u32,
    frame: u32,
    psnr_out: *mut c_double,
) -> c_int {
    if model.is_null() || ds.is_null() || psnr_out.is_null() {
        return set_error(UVD_ERR_USAGE, "null argument");
    }
    let dataset = &(*ds).inner;
    let Some(cam_index) = dataset.camera_index(camera_id) else {
        return set_error(UVD_ERR_DATA, &format!("unknown camera id {camera_id}"));
    };
    let cam = &dataset.cameras[cam_index];
    let n = (cam.width * cam.height) as usize;
    let mut rgb = vec![0.0; n * 3];
    let code = uvd_render(model, ds, camera_id, frame, 0, rgb.as_mut_ptr(), std::ptr::null_mut());
    if code != UVD_OK {
        return code;
    }
    let pixels: Vec<[f64; 3]> = rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let rendered = Rgb64::from_pixels(cam.width, cam.height, pixels);
    let gt = dataset.image(cam_index, frame as usize);
    let bbox = PixelBox::of_mask(cam.width, cam.height, dataset.mask(cam_index, frame as usize));
    match metrics::psnr(&rendered, gt, bbox.as_ref()) {
        Ok(p) => {
            *psnr_out = p;
            UVD_OK
        }
        Err(e) => set_error(UVD_ERR_DATA, &e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn make_dataset_dir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("uvdnerf_ffi_{}", std::process::id()));
        let spec = uvdnerf::synth::SceneSpec {
            rings: 6,
            segments: 8,
            n_frames: 2,
            rig: uvdnerf::synth::CameraRig {
                count: 2,
                orbit_radius: 4.0,
                elevation: 0.3,
                image_size: 24,
                focal_rel: 1.1875,
            },
            eval_cams: 1,
            ..uvdnerf::synth::SceneSpec::default()
        };
        let scene = uvdnerf::synth::generate_scene(&spec).unwrap();
        let ds = uvdnerf::dataset::build_dataset(&scene, &dir);
        uvdnerf::dataset::export_dataset(&ds).unwrap();
        dir
    }

    #[test]
    fn end_to_end_through_the_c_abi() {
        let dir = make_dataset_dir();
        let cpath = CString::new(dir.to_str().unwrap()).unwrap();
        unsafe {
            let ds = uvd_dataset_load(cpath.as_ptr());
            assert!(!ds.is_null());
            let (mut frames, mut cams, mut w, mut h) = (0u32, 0u32, 0u32, 0u32);
            assert_eq!(uvd_dataset_info(ds, &mut frames, &mut cams, &mut w, &mut h), UVD_OK);
            assert_eq!((frames, cams, w, h), (2, 2, 24, 24));

            let cfg = CString::new(
                "iters = 3\nbatch_rays = 64\nn_samples = 8\nhash.table_size_log2 = 10\nhash.levels = 4\nhash.n_max = 32\noffset_hash.table_size_log2 = 10\noffset_hash.levels = 4\noffset_hash.n_max = 32\nthreads = 1\n",
            )
            .unwrap();
            let model = uvd_train(ds, cfg.as_ptr());
            assert!(!model.is_null(), "{:?}", CStr::from_ptr(uvd_last_error_message()));
            assert_eq!(uvd_model_iterations(model), 3);

            let mut rgb = vec![0.0f64; (w * h * 3) as usize];
            let mut weight = vec![0.0f64; (w * h) as usize];
            assert_eq!(
                uvd_render(model, ds, 1, 0, 0, rgb.as_mut_ptr(), weight.as_mut_ptr()),
                UVD_OK
            );
            assert!(rgb.iter().all(|v| v.is_finite()));

            let mut psnr = 0.0;
            assert_eq!(uvd_eval_psnr(model, ds, 1, 0, &mut psnr), UVD_OK);
            assert!(psnr.is_finite() && psnr > 0.0);

            // Save, reload, render again: identical output.
            let ckpt_path = dir.join("m.ckpt");
            let cckpt = CString::new(ckpt_path.to_str().unwrap()).unwrap();
            assert_eq!(uvd_model_save(model, cckpt.as_ptr()), UVD_OK);
            let model2 = uvd_model_load(cckpt.as_ptr());
            assert!(!model2.is_null());
            let mut rgb2 = vec![0.0f64; (w * h * 3) as usize];
            assert_eq!(
                uvd_render(model2, ds, 1, 0, 0, rgb2.as_mut_ptr(), std::ptr::null_mut()),
                UVD_OK
            );
            assert_eq!(rgb, rgb2);

            // Error paths set codes and messages.
            let mut p = 0.0;
            assert_eq!(uvd_eval_psnr(model, ds, 99, 0, &mut p), UVD_ERR_DATA);
            let msg = CStr::from_ptr(uvd_last_error_message()).to_str().unwrap();
            assert!(msg.contains("unknown camera"));

            uvd_model_free(model2);
            uvd_model_free(model);
            uvd_dataset_free(ds);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_paths_and_null_handles_are_rejected() {
        unsafe {
            let bogus = CString::new("/nonexistent/dataset").unwrap();
            assert!(uvd_dataset_load(bogus.as_ptr()).is_null());
            assert!(uvd_model_load(bogus.as_ptr()).is_null());
            assert_eq!(
                uvd_dataset_info(std::ptr::null(), std::ptr::null_mut(), std::ptr::null_mut(), std::ptr::null_mut(), std::ptr::null_mut()),
                UVD_ERR_USAGE
            );
            assert!(!uvd_version().is_null());
        }
    }
}
