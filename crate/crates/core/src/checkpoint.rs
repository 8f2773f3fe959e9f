//! Versioned binary checkpoints: magic `INGP-IC\0`, a u32 version, then
//! named tensor sections (name, dtype, shape, little-endian payload).
//! Everything round-trips bit-exactly, so a reloaded model renders
//! byte-identical images in deterministic mode.

use crate::encoding::HashTables;
use crate::field::{FieldAdam, FieldConfig, NeuralField};
use crate::intrinsic::{DistanceSquash, TemplateNormalizer};
use crate::mlp::{Activation, AdamMoments, Dense, Mlp};
use crate::training::LossWeights;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"INGP-IC\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("meta json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Encoding(#[from] crate::encoding::EncodingError),
}

/// A trained model with everything needed to render and resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub field: NeuralField,
    pub adam: FieldAdam,
    pub iteration: u64,
    pub weights: LossWeights,
    pub squash: DistanceSquash,
    pub normalizer: TemplateNormalizer,
    /// Absolute shell radius used for ray culling.
    pub shell: f64,
    /// Default samples per ray for rendering.
    pub n_samples: usize,
    /// Verbatim resolved run configuration, for provenance.
    pub config_echo: String,
}

#[derive(Serialize, Deserialize)]
struct MlpMeta {
    layers: Vec<(usize, usize, u8)>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    field: FieldConfig,
    radiance_mlp: MlpMeta,
    offset_mlp: MlpMeta,
    iteration: u64,
    weights: LossWeights,
    squash_k: f64,
    normalizer: TemplateNormalizer,
    shell: f64,
    n_samples: usize,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    n_moment_tensors: usize,
}

fn mlp_meta(mlp: &Mlp) -> MlpMeta {
    MlpMeta {
        layers: mlp
            .layers
            .iter()
            .map(|l| {
                let act = match l.activation {
                    Activation::Relu => 0u8,
                    Activation::Linear => 1u8,
                };
                (l.in_dim, l.out_dim, act)
            })
            .collect(),
    }
}

enum Section {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

fn write_section(out: &mut impl Write, name: &str, data: &Section) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    out.write_all(name_bytes)?;
    match data {
        Section::F64(values) => {
            out.write_all(&[0u8])?; // dtype f64
            out.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Section::Bytes(bytes) => {
            out.write_all(&[1u8])?; // dtype u8
            out.write_all(&(bytes.len() as u64).to_le_bytes())?;
            out.write_all(bytes)?;
        }
    }
    Ok(())
}

fn read_exact_or(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    input
        .read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt(format!("unexpected end of file reading {what}")))
}

fn read_section(input: &mut impl Read) -> Result<Option<(String, Section)>, CheckpointError> {
    let mut len2 = [0u8; 2];
    match input.read_exact(&mut len2) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let name_len = u16::from_le_bytes(len2) as usize;
    let mut name = vec![0u8; name_len];
    read_exact_or(input, &mut name, "section name")?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Corrupt("section name is not utf-8".into()))?;
    let mut dtype = [0u8; 1];
    read_exact_or(input, &mut dtype, "dtype")?;
    let mut count8 = [0u8; 8];
    read_exact_or(input, &mut count8, "length")?;
    let count = u64::from_le_bytes(count8) as usize;
    let section = match dtype[0] {
        0 => {
            let mut bytes = vec![0u8; count * 8];
            read_exact_or(input, &mut bytes, &format!("payload of {name}"))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Section::F64(values)
        }
        1 => {
            let mut bytes = vec![0u8; count];
            read_exact_or(input, &mut bytes, &format!("payload of {name}"))?;
            Section::Bytes(bytes)
        }
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "unknown dtype {other} in section {name}"
            )))
        }
    };
    Ok(Some((name, section)))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;

    let meta = Meta {
        field: ckpt.field.cfg,
        radiance_mlp: mlp_meta(&ckpt.field.radiance_mlp),
        offset_mlp: mlp_meta(&ckpt.field.offset_mlp),
        iteration: ckpt.iteration,
        weights: ckpt.weights,
        squash_k: ckpt.squash.k,
        normalizer: ckpt.normalizer,
        shell: ckpt.shell,
        n_samples: ckpt.n_samples,
        adam_step: ckpt.adam.step,
        adam_beta1: ckpt.adam.beta1,
        adam_beta2: ckpt.adam.beta2,
        adam_eps: ckpt.adam.eps,
        n_moment_tensors: ckpt.adam.moments.len(),
    };
    write_section(&mut out, "meta", &Section::Bytes(serde_json::to_vec(&meta)?))?;
    write_section(
        &mut out,
        "config_echo",
        &Section::Bytes(ckpt.config_echo.as_bytes().to_vec()),
    )?;

    for (lv, data) in ckpt.field.main_tables.features.iter().enumerate() {
        write_section(&mut out, &format!("enc_main/level_{lv:02}"), &Section::F64(data.clone()))?;
    }
    for (lv, data) in ckpt.field.offset_tables.features.iter().enumerate() {
        write_section(&mut out, &format!("enc_off/level_{lv:02}"), &Section::F64(data.clone()))?;
    }
    for (prefix, mlp) in [("mlp_rad", &ckpt.field.radiance_mlp), ("mlp_off", &ckpt.field.offset_mlp)] {
        for (l, layer) in mlp.layers.iter().enumerate() {
            write_section(&mut out, &format!("{prefix}/w{l}"), &Section::F64(layer.weights.clone()))?;
            write_section(&mut out, &format!("{prefix}/b{l}"), &Section::F64(layer.bias.clone()))?;
        }
    }
    write_section(&mut out, "latents", &Section::F64(ckpt.field.latents.clone()))?;
    for (i, m) in ckpt.adam.moments.iter().enumerate() {
        write_section(&mut out, &format!("adam/m_{i:03}"), &Section::F64(m.m.clone()))?;
        write_section(&mut out, &format!("adam/v_{i:03}"), &Section::F64(m.v.clone()))?;
    }
    out.flush()?;
    Ok(())
}

fn take_f64(
    sections: &mut BTreeMap<String, Section>,
    name: &str,
) -> Result<Vec<f64>, CheckpointError> {
    match sections.remove(name) {
        Some(Section::F64(v)) => Ok(v),
        Some(Section::Bytes(_)) => Err(CheckpointError::Corrupt(format!(
            "section {name} has the wrong dtype"
        ))),
        None => Err(CheckpointError::MissingSection(name.into())),
    }
}

fn build_mlp(
    meta: &MlpMeta,
    prefix: &str,
    sections: &mut BTreeMap<String, Section>,
) -> Result<Mlp, CheckpointError> {
    let mut layers = Vec::new();
    for (l, &(in_dim, out_dim, act)) in meta.layers.iter().enumerate() {
        let weights = take_f64(sections, &format!("{prefix}/w{l}"))?;
        let bias = take_f64(sections, &format!("{prefix}/b{l}"))?;
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(CheckpointError::Corrupt(format!(
                "layer {prefix}/{l} has inconsistent shapes"
            )));
        }
        layers.push(Dense {
            in_dim,
            out_dim,
            weights,
            bias,
            activation: if act == 0 { Activation::Relu } else { Activation::Linear },
        });
    }
    Ok(Mlp { layers })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut input = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut ver = [0u8; 4];
    read_exact_or(&mut input, &mut ver, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut sections = BTreeMap::new();
    while let Some((name, section)) = read_section(&mut input)? {
        sections.insert(name, section);
    }

    let meta: Meta = match sections.remove("meta") {
        Some(Section::Bytes(bytes)) => serde_json::from_slice(&bytes)?,
        _ => return Err(CheckpointError::MissingSection("meta".into())),
    };
    let config_echo = match sections.remove("config_echo") {
        Some(Section::Bytes(bytes)) => String::from_utf8(bytes)
            .map_err(|_| CheckpointError::Corrupt("config echo is not utf-8".into()))?,
        _ => String::new(),
    };

    let cfg = meta.field;
    let dim = cfg.coord.dim();
    let mut main_levels = Vec::with_capacity(cfg.hash.levels);
    for lv in 0..cfg.hash.levels {
        main_levels.push(take_f64(&mut sections, &format!("enc_main/level_{lv:02}"))?);
    }
    let mut off_levels = Vec::with_capacity(cfg.offset_hash.levels);
    for lv in 0..cfg.offset_hash.levels {
        off_levels.push(take_f64(&mut sections, &format!("enc_off/level_{lv:02}"))?);
    }
    let main_tables = HashTables::from_features(cfg.hash, dim, cfg.indexing, main_levels)?;
    let offset_tables = HashTables::from_features(cfg.offset_hash, dim, cfg.indexing, off_levels)?;

    let radiance_mlp = build_mlp(&meta.radiance_mlp, "mlp_rad", &mut sections)?;
    let offset_mlp = build_mlp(&meta.offset_mlp, "mlp_off", &mut sections)?;
    let latents = take_f64(&mut sections, "latents")?;
    if latents.len() != cfg.n_frames * cfg.latent_dim {
        return Err(CheckpointError::Corrupt("latents have the wrong shape".into()));
    }

    let mut moments = Vec::with_capacity(meta.n_moment_tensors);
    for i in 0..meta.n_moment_tensors {
        let m = take_f64(&mut sections, &format!("adam/m_{i:03}"))?;
        let v = take_f64(&mut sections, &format!("adam/v_{i:03}"))?;
        if m.len() != v.len() {
            return Err(CheckpointError::Corrupt(format!("adam tensor {i} shape mismatch")));
        }
        moments.push(AdamMoments { m, v });
    }

    let field = NeuralField {
        cfg,
        main_tables,
        offset_tables,
        radiance_mlp,
        offset_mlp,
        latents,
    };
    let adam = FieldAdam {
        step: meta.adam_step,
        beta1: meta.adam_beta1,
        beta2: meta.adam_beta2,
        eps: meta.adam_eps,
        moments,
    };
    Ok(Checkpoint {
        field,
        adam,
        iteration: meta.iteration,
        weights: meta.weights,
        squash: DistanceSquash::new(meta.squash_k),
        normalizer: meta.normalizer,
        shell: meta.shell,
        n_samples: meta.n_samples,
        config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CoordKind;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hash = crate::encoding::HashGridConfig {
            levels: 3,
            table_size: 1 << 9,
            feature_dim: 2,
            n_min: 2,
            n_max: 8,
        };
        let cfg = FieldConfig {
            hash,
            offset_hash: hash,
            hidden_dim: 8,
            hidden_layers: 2,
            latent_dim: 4,
            n_frames: 2,
            table_init_scale: 0.3,
            ..FieldConfig::defaults(CoordKind::UvD, 2)
        };
        let field = NeuralField::init(cfg, &mut rng).unwrap();
        let mut adam = FieldAdam::new(&field);
        adam.step = 17;
        for m in adam.moments.iter_mut() {
            for v in m.m.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in m.v.iter_mut() {
                *v = rng.random::<f64>();
            }
        }
        Checkpoint {
            field,
            adam,
            iteration: 123,
            weights: LossWeights {
                lambda_mask: 0.1,
                lambda_dist: 0.01,
                lambda_dfm: 0.01,
                beta: 5.7,
                phase_switch_iter: 400,
                lambda_early: 1.0,
                lambda_late: 0.1,
            },
            squash: DistanceSquash::new(2.31),
            normalizer: TemplateNormalizer::new(
                crate::geom::vec3(-1.2, -1.2, -1.2),
                crate::geom::vec3(1.2, 1.2, 1.2),
            ),
            shell: 0.519,
            n_samples: 48,
            config_echo: "seed = 7\niters = 123\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = std::env::temp_dir().join(format!("uvdnerf_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();

        assert_eq!(back.iteration, ckpt.iteration);
        assert_eq!(back.field.cfg, ckpt.field.cfg);
        assert_eq!(back.field.latents, ckpt.field.latents);
        for lv in 0..ckpt.field.cfg.hash.levels {
            assert_eq!(back.field.main_tables.features[lv], ckpt.field.main_tables.features[lv]);
            assert_eq!(back.field.offset_tables.features[lv], ckpt.field.offset_tables.features[lv]);
        }
        for (a, b) in back
            .field
            .radiance_mlp
            .layers
            .iter()
            .zip(&ckpt.field.radiance_mlp.layers)
        {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(back.adam.step, ckpt.adam.step);
        for (a, b) in back.adam.moments.iter().zip(&ckpt.adam.moments) {
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        assert_eq!(back.weights, ckpt.weights);
        assert_eq!(back.squash.k, ckpt.squash.k);
        assert_eq!(back.normalizer, ckpt.normalizer);
        assert_eq!(back.shell, ckpt.shell);
        assert_eq!(back.config_echo, ckpt.config_echo);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = std::env::temp_dir().join(format!("uvdnerf_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated_path = dir.join("truncated.ckpt");
        std::fs::write(&truncated_path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated_path),
            Err(CheckpointError::Corrupt(_)) | Err(CheckpointError::MissingSection(_))
        ));

        let bad_magic_path = dir.join("magic.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&bad_magic_path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic_path), Err(CheckpointError::BadMagic)));

        let bad_version_path = dir.join("version.ckpt");
        let mut bad = bytes;
        bad[8] = 99;
        std::fs::write(&bad_version_path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version_path),
            Err(CheckpointError::BadVersion(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
