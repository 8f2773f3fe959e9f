//! On-disk dataset layout shared by the generator, the trainer and the
//! evaluation tools:
//!
//! ```text
//! meshes/frame_0000.obj ...      proxy mesh per frame
//! cameras.json                   pinhole cameras, row-major 4x4 poses
//! images/cam00/frame_0000.png    one image per (camera, frame)
//! masks/cam00/frame_0000.png     binary foreground mask per (camera, frame)
//! split.json                     train/eval camera ids
//! ```

use crate::geom::{Affine, Mat3, Vec3};
use crate::img::{self, Rgb64};
use crate::mesh::{self, ProxySequence};
use crate::renderer::Camera;
use crate::synth::{oracle_render, rig_cameras, TrueScene};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Mesh {
        path: PathBuf,
        source: mesh::MeshError,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: img::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("mask {path} is not binary (value {value})")]
    NonBinaryMask { path: PathBuf, value: f64 },
    #[error("camera id {0} appears twice in cameras.json")]
    DuplicateCamera(u32),
    #[error("split.json references unknown camera id {0}")]
    UnknownSplitCamera(u32),
    #[error("dataset has no frames")]
    Empty,
    #[error("invalid camera {id}: {source}")]
    BadCamera {
        id: u32,
        source: crate::renderer::RenderError,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Split {
    pub train_cams: Vec<u32>,
    pub eval_cams: Vec<u32>,
}

/// Serialized camera record; the pose is a row-major 4x4 world-to-camera
/// matrix with a rigid upper-left block.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_cam: Vec<f64>,
    near: f64,
    far: f64,
}

impl CameraRecord {
    fn from_camera(cam: &Camera) -> CameraRecord {
        let r = &cam.world_to_cam.linear.rows;
        let t = cam.world_to_cam.translation;
        let world_to_cam = vec![
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            0.0, 0.0, 0.0, 1.0,
        ];
        CameraRecord {
            id: cam.id,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_cam,
            near: cam.near,
            far: cam.far,
        }
    }

    fn into_camera(self) -> Camera {
        let m = &self.world_to_cam;
        let linear = Mat3 {
            rows: [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
        };
        let translation = Vec3 {
            x: m[3],
            y: m[7],
            z: m[11],
        };
        Camera {
            id: self.id,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_cam: Affine::new(linear, translation),
            near: self.near,
            far: self.far,
        }
    }
}

/// A fully loaded dataset. Images and masks are indexed by
/// `(camera index within `cameras`, frame)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub seq: ProxySequence,
    pub cameras: Vec<Camera>,
    pub images: Vec<Rgb64>,
    pub masks: Vec<Vec<bool>>,
    pub split: Split,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.seq.len()
    }

    pub fn pair_index(&self, cam_index: usize, frame: usize) -> usize {
        cam_index * self.n_frames() + frame
    }

    pub fn image(&self, cam_index: usize, frame: usize) -> &Rgb64 {
        &self.images[self.pair_index(cam_index, frame)]
    }

    pub fn mask(&self, cam_index: usize, frame: usize) -> &[bool] {
        &self.masks[self.pair_index(cam_index, frame)]
    }

    pub fn camera_index(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    /// Indices (into `cameras`) of the training cameras.
    pub fn train_camera_indices(&self) -> Vec<usize> {
        self.split
            .train_cams
            .iter()
            .filter_map(|id| self.camera_index(*id))
            .collect()
    }

    pub fn eval_camera_indices(&self) -> Vec<usize> {
        self.split
            .eval_cams
            .iter()
            .filter_map(|id| self.camera_index(*id))
            .collect()
    }
}

pub fn mesh_filename(frame: usize) -> String {
    format!("frame_{frame:04}.obj")
}

pub fn image_relpath(cam_id: u32, frame: usize) -> String {
    format!("images/cam{cam_id:02}/frame_{frame:04}.png")
}

pub fn mask_relpath(cam_id: u32, frame: usize) -> String {
    format!("masks/cam{cam_id:02}/frame_{frame:04}.png")
}

/// Renders ground truth for every (camera, frame) pair of a scene and
/// assembles the in-memory dataset rooted at `root` (nothing written yet).
pub fn build_dataset(scene: &TrueScene, root: &Path) -> Dataset {
    let cameras = rig_cameras(&scene.spec);
    let n_frames = scene.spec.n_frames;
    let mut images = Vec::with_capacity(cameras.len() * n_frames);
    let mut masks = Vec::with_capacity(cameras.len() * n_frames);
    for cam in &cameras {
        for frame in 0..n_frames {
            let (img, mask) = oracle_render(scene, cam, frame);
            images.push(img);
            masks.push(mask);
        }
    }
    let train_count = cameras.len() - scene.spec.eval_cams;
    let split = Split {
        train_cams: cameras[..train_count].iter().map(|c| c.id).collect(),
        eval_cams: cameras[train_count..].iter().map(|c| c.id).collect(),
    };
    Dataset {
        root: root.to_path_buf(),
        seq: scene.proxies.clone(),
        cameras,
        images,
        masks,
        split,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the dataset directory layout losslessly (images through 8-bit PNG
/// quantization).
pub fn export_dataset(ds: &Dataset) -> Result<(), DatasetError> {
    let root = &ds.root;
    for (t, frame) in ds.seq.frames.iter().enumerate() {
        let path = root.join("meshes").join(mesh_filename(t));
        write_file(&path, &mesh::serialize_obj(frame))?;
    }
    let records: Vec<CameraRecord> = ds.cameras.iter().map(CameraRecord::from_camera).collect();
    let cameras_path = root.join("cameras.json");
    let json = serde_json::to_string_pretty(&records).map_err(|source| DatasetError::Json {
        path: cameras_path.clone(),
        source,
    })?;
    write_file(&cameras_path, &json)?;
    let split_path = root.join("split.json");
    let json = serde_json::to_string_pretty(&ds.split).map_err(|source| DatasetError::Json {
        path: split_path.clone(),
        source,
    })?;
    write_file(&split_path, &json)?;

    for (ci, cam) in ds.cameras.iter().enumerate() {
        for frame in 0..ds.n_frames() {
            let img_path = root.join(image_relpath(cam.id, frame));
            if let Some(parent) = img_path.parent() {
                fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            img::save_rgb_png(&img_path, ds.image(ci, frame)).map_err(|source| {
                DatasetError::Image {
                    path: img_path.clone(),
                    source,
                }
            })?;
            let mask_path = root.join(mask_relpath(cam.id, frame));
            if let Some(parent) = mask_path.parent() {
                fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            let values: Vec<f64> = ds
                .mask(ci, frame)
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect();
            img::save_gray_png(&mask_path, cam.width, cam.height, &values).map_err(|source| {
                DatasetError::Image {
                    path: mask_path.clone(),
                    source,
                }
            })?;
        }
    }
    Ok(())
}

/// Loads and validates a dataset directory; every (camera, frame) pair must
/// be present and masks must be strictly binary.
pub fn import_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    // Meshes: consecutive frame files from 0.
    let mut frames = Vec::new();
    loop {
        let path = root.join("meshes").join(mesh_filename(frames.len()));
        if !path.exists() {
            break;
        }
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        frames.push(mesh::parse_obj(&text).map_err(|source| DatasetError::Mesh {
            path: path.clone(),
            source,
        })?);
    }
    if frames.is_empty() {
        return Err(DatasetError::MissingFile(root.join("meshes").join(mesh_filename(0))));
    }
    let seq = validate_sequence_expect(root, frames)?;

    let cameras_path = root.join("cameras.json");
    if !cameras_path.exists() {
        return Err(DatasetError::MissingFile(cameras_path));
    }
    let text = fs::read_to_string(&cameras_path).map_err(|source| DatasetError::Io {
        path: cameras_path.clone(),
        source,
    })?;
    let records: Vec<CameraRecord> =
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: cameras_path.clone(),
            source,
        })?;
    let mut cameras = Vec::with_capacity(records.len());
    for rec in records {
        let cam = rec.into_camera();
        if cameras.iter().any(|c: &Camera| c.id == cam.id) {
            return Err(DatasetError::DuplicateCamera(cam.id));
        }
        cam.validate().map_err(|source| DatasetError::BadCamera {
            id: cam.id,
            source,
        })?;
        cameras.push(cam);
    }

    let split_path = root.join("split.json");
    if !split_path.exists() {
        return Err(DatasetError::MissingFile(split_path));
    }
    let text = fs::read_to_string(&split_path).map_err(|source| DatasetError::Io {
        path: split_path.clone(),
        source,
    })?;
    let split: Split = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: split_path.clone(),
        source,
    })?;
    for id in split.train_cams.iter().chain(&split.eval_cams) {
        if !cameras.iter().any(|c| c.id == *id) {
            return Err(DatasetError::UnknownSplitCamera(*id));
        }
    }

    let n_frames = seq.len();
    let mut images = Vec::with_capacity(cameras.len() * n_frames);
    let mut masks = Vec::with_capacity(cameras.len() * n_frames);
    for cam in &cameras {
        for frame in 0..n_frames {
            let img_path = root.join(image_relpath(cam.id, frame));
            if !img_path.exists() {
                return Err(DatasetError::MissingFile(img_path));
            }
            images.push(img::load_rgb_png(&img_path).map_err(|source| DatasetError::Image {
                path: img_path.clone(),
                source,
            })?);
            let mask_path = root.join(mask_relpath(cam.id, frame));
            if !mask_path.exists() {
                return Err(DatasetError::MissingFile(mask_path));
            }
            let (_, _, values) =
                img::load_gray_png(&mask_path).map_err(|source| DatasetError::Image {
                    path: mask_path.clone(),
                    source,
                })?;
            let mut mask = Vec::with_capacity(values.len());
            for v in values {
                if v != 0.0 && v != 1.0 {
                    return Err(DatasetError::NonBinaryMask {
                        path: mask_path.clone(),
                        value: v,
                    });
                }
                mask.push(v == 1.0);
            }
            masks.push(mask);
        }
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        seq,
        cameras,
        images,
        masks,
        split,
    })
}

fn validate_sequence_expect(
    root: &Path,
    frames: Vec<crate::mesh::TriangleMesh>,
) -> Result<ProxySequence, DatasetError> {
    mesh::validate_sequence(frames).map_err(|source| DatasetError::Mesh {
        path: root.join("meshes"),
        source,
    })
}
