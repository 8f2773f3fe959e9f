//! Multi-resolution hash-grid feature encoding with multilinear interpolation
//! and exact gradient accumulation, for 3D and 4D inputs.
//!
//! Each level stores `table_size` feature vectors. Coarse levels whose full
//! grid fits in the table are indexed injectively (dense, collision-free);
//! finer levels fall back to the XOR-of-primes spatial hash. `DenseForced`
//! requires every level to fit and never hashes, which is the collision-free
//! reference mode.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("dense indexing forced but level {level} needs {cells} cells > table size {table}")]
    DenseDoesNotFit {
        level: usize,
        cells: u128,
        table: usize,
    },
    #[error("table size {0} is not a power of two")]
    TableSizeNotPowerOfTwo(usize),
    #[error("invalid hash grid config: {0}")]
    InvalidConfig(String),
}

/// Hash-table indices mix the cell coordinates with these per-dimension
/// multipliers before the XOR fold. Fixed so checkpoints are portable.
pub const HASH_PRIMES: [u64; 4] = [1, 2654435761, 805459861, 3674653429];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    /// Number of resolution levels L.
    pub levels: usize,
    /// Feature vectors per level, J; a power of two.
    pub table_size: usize,
    /// Features per table entry, F.
    pub feature_dim: usize,
    /// Coarsest grid resolution.
    pub n_min: u32,
    /// Finest grid resolution.
    pub n_max: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            table_size: 1 << 19,
            feature_dim: 2,
            n_min: 16,
            n_max: 1024,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if !self.table_size.is_power_of_two() {
            return Err(EncodingError::TableSizeNotPowerOfTwo(self.table_size));
        }
        if self.levels < 2 {
            return Err(EncodingError::InvalidConfig("need at least 2 levels".into()));
        }
        if self.feature_dim < 1 {
            return Err(EncodingError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.n_min >= self.n_max {
            return Err(EncodingError::InvalidConfig(format!(
                "n_min {} must be < n_max {}",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feature_dim
    }
}

/// Geometric level resolutions: `N_l = floor(n_min * b^l)` for `l = 0..L-1`
/// with `b = exp((ln n_max - ln n_min)/(L-1))`, so `N_0 = n_min` and
/// `N_{L-1} = n_max` exactly.
pub fn level_resolutions(cfg: &HashGridConfig) -> Vec<u32> {
    let l = cfg.levels;
    let b = ((cfg.n_max as f64).ln() - (cfg.n_min as f64).ln()) / (l as f64 - 1.0);
    (0..l)
        .map(|i| {
            // The tiny epsilon keeps mathematically-integer values (like the
            // endpoints) from flooring one short after rounding error.
            let v = cfg.n_min as f64 * (b * i as f64).exp();
            (v + 1e-9).floor() as u32
        })
        .collect()
}

/// XOR-of-primes spatial hash of an integer cell, modulo the table size.
/// Arithmetic is wrapping unsigned 64-bit.
pub fn spatial_hash(cell: &[u64], table_size: usize) -> usize {
    let mut acc: u64 = 0;
    for (i, &c) in cell.iter().enumerate() {
        acc ^= c.wrapping_mul(HASH_PRIMES[i]);
    }
    (acc % table_size as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexingMode {
    /// Dense injective indexing at levels whose grid fits the table,
    /// spatial hashing elsewhere.
    HashedAuto,
    /// Dense injective indexing at every level; construction fails if the
    /// finest grid does not fit. Collision-free by construction.
    DenseForced,
}

/// Learnable feature tables for all levels. Entries are f64; shapes are
/// `table_size * feature_dim` per level regardless of mode.
#[derive(Debug, Clone)]
pub struct HashTables {
    pub cfg: HashGridConfig,
    /// Input dimensionality (3 for UV-D, 4 for XYZ-D).
    pub dim: usize,
    pub mode: IndexingMode,
    pub resolutions: Vec<u32>,
    /// Per level: whether injective dense indexing is in effect.
    pub dense_level: Vec<bool>,
    /// Per level: `table_size * feature_dim` learnable values.
    pub features: Vec<Vec<f64>>,
}

/// Number of grid corners per axis at resolution n is n + 1.
fn grid_cells(n: u32, dim: usize) -> u128 {
    (n as u128 + 1).pow(dim as u32)
}

impl HashTables {
    /// Fresh tables with entries uniform in [-init_scale, init_scale].
    pub fn new(
        cfg: HashGridConfig,
        dim: usize,
        mode: IndexingMode,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<HashTables, EncodingError> {
        cfg.validate()?;
        assert!(dim == 3 || dim == 4, "supported input dims are 3 and 4");
        let resolutions = level_resolutions(&cfg);
        let mut dense_level = Vec::with_capacity(cfg.levels);
        for (l, &n) in resolutions.iter().enumerate() {
            let cells = grid_cells(n, dim);
            let fits = cells <= cfg.table_size as u128;
            match mode {
                IndexingMode::HashedAuto => dense_level.push(fits),
                IndexingMode::DenseForced => {
                    if !fits {
                        return Err(EncodingError::DenseDoesNotFit {
                            level: l,
                            cells,
                            table: cfg.table_size,
                        });
                    }
                    dense_level.push(true);
                }
            }
        }
        let per_level = cfg.table_size * cfg.feature_dim;
        let features = (0..cfg.levels)
            .map(|_| {
                (0..per_level)
                    .map(|_| rng.random_range(-init_scale..init_scale))
                    .collect()
            })
            .collect();
        Ok(HashTables {
            cfg,
            dim,
            mode,
            resolutions,
            dense_level,
            features,
        })
    }

    /// Rebuilds tables around existing feature data (checkpoint loading).
    pub fn from_features(
        cfg: HashGridConfig,
        dim: usize,
        mode: IndexingMode,
        features: Vec<Vec<f64>>,
    ) -> Result<HashTables, EncodingError> {
        cfg.validate()?;
        assert!(dim == 3 || dim == 4, "supported input dims are 3 and 4");
        if features.len() != cfg.levels {
            return Err(EncodingError::InvalidConfig(format!(
                "expected {} level tensors, got {}",
                cfg.levels,
                features.len()
            )));
        }
        let per_level = cfg.table_size * cfg.feature_dim;
        for (l, lv) in features.iter().enumerate() {
            if lv.len() != per_level {
                return Err(EncodingError::InvalidConfig(format!(
                    "level {l} has {} entries, expected {per_level}",
                    lv.len()
                )));
            }
        }
        let resolutions = level_resolutions(&cfg);
        let mut dense_level = Vec::with_capacity(cfg.levels);
        for (l, &n) in resolutions.iter().enumerate() {
            let cells = grid_cells(n, dim);
            let fits = cells <= cfg.table_size as u128;
            match mode {
                IndexingMode::HashedAuto => dense_level.push(fits),
                IndexingMode::DenseForced => {
                    if !fits {
                        return Err(EncodingError::DenseDoesNotFit {
                            level: l,
                            cells,
                            table: cfg.table_size,
                        });
                    }
                    dense_level.push(true);
                }
            }
        }
        Ok(HashTables {
            cfg,
            dim,
            mode,
            resolutions,
            dense_level,
            features,
        })
    }

    /// Table slot of a corner at `level`; injective strided indexing on dense
    /// levels, spatial hash otherwise.
    #[inline]
    pub fn corner_index(&self, level: usize, corner: &[u64]) -> usize {
        if self.dense_level[level] {
            let n1 = self.resolutions[level] as u64 + 1;
            let mut idx: u64 = 0;
            for &c in corner.iter().rev() {
                idx = idx * n1 + c;
            }
            idx as usize
        } else {
            spatial_hash(corner, self.cfg.table_size)
        }
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }
}

/// Per-level cell decomposition of a point: base corner and fractional
/// position. `z` components must be in [0,1].
#[inline]
fn cell_of(z: f64, n: u32) -> (u64, f64) {
    let pos = z * n as f64;
    let cell = (pos.floor() as i64).clamp(0, n as i64 - 1) as u64;
    (cell, pos - cell as f64)
}

/// Encodes `z` into `out` (length `levels * feature_dim`): per level, the
/// multilinear interpolation of the 2^dim corner features, concatenated.
pub fn encode(z: &[f64], tables: &HashTables, out: &mut [f64]) {
    assert_eq!(z.len(), tables.dim, "input dim mismatch");
    assert_eq!(out.len(), tables.output_dim());
    let dim = tables.dim;
    let f_dim = tables.cfg.feature_dim;
    let corners = 1usize << dim;
    let mut base = [0u64; 4];
    let mut frac = [0f64; 4];
    for level in 0..tables.cfg.levels {
        let n = tables.resolutions[level];
        for a in 0..dim {
            let (c, f) = cell_of(z[a], n);
            base[a] = c;
            frac[a] = f;
        }
        let table = &tables.features[level];
        let out_slice = &mut out[level * f_dim..(level + 1) * f_dim];
        out_slice.fill(0.0);
        let mut corner = [0u64; 4];
        for bits in 0..corners {
            let mut w = 1.0;
            for a in 0..dim {
                if bits >> a & 1 == 1 {
                    corner[a] = base[a] + 1;
                    w *= frac[a];
                } else {
                    corner[a] = base[a];
                    w *= 1.0 - frac[a];
                }
            }
            let idx = tables.corner_index(level, &corner[..dim]);
            let feat = &table[idx * f_dim..idx * f_dim + f_dim];
            for (o, &v) in out_slice.iter_mut().zip(feat) {
                *o += w * v;
            }
        }
    }
}

pub fn encode_vec(z: &[f64], tables: &HashTables) -> Vec<f64> {
    let mut out = vec![0.0; tables.output_dim()];
    encode(z, tables, &mut out);
    out
}

/// Gradient accumulator matching a `HashTables` shape. Accumulation is
/// plain (each worker owns its own buffer); buffers merge additively, and
/// single- versus multi-worker accumulation of the same contributions agree
/// within 1e-10 per entry since only the summation order differs.
#[derive(Debug, Clone)]
pub struct TableGradients {
    levels: Vec<Vec<f64>>,
}

impl TableGradients {
    pub fn zeros_like(tables: &HashTables) -> TableGradients {
        TableGradients {
            levels: tables.features.iter().map(|lv| vec![0.0; lv.len()]).collect(),
        }
    }

    #[inline]
    pub fn add(&mut self, level: usize, index: usize, v: f64) {
        self.levels[level][index] += v;
    }

    #[inline]
    pub fn load(&self, level: usize, index: usize) -> f64 {
        self.levels[level][index]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn clear(&mut self) {
        for lv in &mut self.levels {
            lv.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &TableGradients) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.levels.clone()
    }
}

/// Backward pass of `encode`: scatters `dl_dh` into the touched table entries
/// weighted by their interpolation weights, and optionally returns the exact
/// derivative of the encoding with respect to `z`.
pub fn encode_backward(
    z: &[f64],
    dl_dh: &[f64],
    tables: &HashTables,
    grads: &mut TableGradients,
    mut dl_dz: Option<&mut [f64]>,
) {
    assert_eq!(z.len(), tables.dim);
    assert_eq!(dl_dh.len(), tables.output_dim());
    if let Some(dz) = dl_dz.as_deref_mut() {
        assert_eq!(dz.len(), tables.dim);
        dz.fill(0.0);
    }
    let dim = tables.dim;
    let f_dim = tables.cfg.feature_dim;
    let corners = 1usize << dim;
    let mut base = [0u64; 4];
    let mut frac = [0f64; 4];
    let mut corner = [0u64; 4];
    for level in 0..tables.cfg.levels {
        let n = tables.resolutions[level];
        for a in 0..dim {
            let (c, f) = cell_of(z[a], n);
            base[a] = c;
            frac[a] = f;
        }
        let table = &tables.features[level];
        let up = &dl_dh[level * f_dim..(level + 1) * f_dim];
        for bits in 0..corners {
            let mut w = 1.0;
            for a in 0..dim {
                if bits >> a & 1 == 1 {
                    corner[a] = base[a] + 1;
                    w *= frac[a];
                } else {
                    corner[a] = base[a];
                    w *= 1.0 - frac[a];
                }
            }
            let idx = tables.corner_index(level, &corner[..dim]);
            for (k, &u) in up.iter().enumerate() {
                if u != 0.0 {
                    grads.add(level, idx * f_dim + k, w * u);
                }
            }
            if let Some(dz) = dl_dz.as_deref_mut() {
                // dot of upstream with the corner feature, reused per axis
                let feat = &table[idx * f_dim..idx * f_dim + f_dim];
                let mut dot = 0.0;
                for (k, &u) in up.iter().enumerate() {
                    dot += u * feat[k];
                }
                if dot != 0.0 {
                    for a in 0..dim {
                        // dw/dfrac_a = sign * product of the other factors
                        let mut pw = 1.0;
                        for b in 0..dim {
                            if b == a {
                                continue;
                            }
                            pw *= if bits >> b & 1 == 1 { frac[b] } else { 1.0 - frac[b] };
                        }
                        let sign = if bits >> a & 1 == 1 { 1.0 } else { -1.0 };
                        dz[a] += dot * sign * pw * n as f64;
                    }
                }
            }
        }
    }
}

/// Region signature of an encoding evaluation: the per-level cell indices.
/// Two evaluations in the same cells see the same linear pieces, which is
/// what finite-difference checks must hold fixed.
pub fn cell_signature(z: &[f64], tables: &HashTables, out: &mut Vec<u64>) {
    for level in 0..tables.cfg.levels {
        let n = tables.resolutions[level];
        for &za in z.iter() {
            let (c, _) = cell_of(za, n);
            out.push(c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            table_size: 1 << 10,
            feature_dim: 2,
            n_min: 2,
            n_max: 8,
        }
    }

    #[test]
    fn resolutions_hit_endpoints_exactly() {
        let cfg = HashGridConfig::default();
        let res = level_resolutions(&cfg);
        assert_eq!(res[0], 16);
        assert_eq!(res[15], 1024);
        // Interior levels are monotone.
        for w in res.windows(2) {
            assert!(w[0] < w[1]);
        }
        // b^5 = 64^(1/3) = 4 exactly, so level 5 is 64 and level 10 is 256.
        assert_eq!(res[5], 64);
        assert_eq!(res[10], 256);

        let two = HashGridConfig {
            levels: 2,
            ..HashGridConfig::default()
        };
        assert_eq!(level_resolutions(&two), vec![16, 1024]);
    }

    #[test]
    fn spatial_hash_examples() {
        assert_eq!(spatial_hash(&[0, 0, 0], 1 << 14), 0);
        assert_eq!(spatial_hash(&[1, 0, 0], 1 << 14), 1);
        // Independently evaluated expression for cell (1,2,3) mod 8.
        let expected = (1u64 ^ 2u64.wrapping_mul(2654435761) ^ 3u64.wrapping_mul(805459861)) % 8;
        assert_eq!(spatial_hash(&[1, 2, 3], 8), expected as usize);
    }

    #[test]
    fn encode_at_grid_corner_is_table_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        // z = (0,0,0) lands exactly on corner (0,0,0) of every level.
        let h = encode_vec(&[0.0, 0.0, 0.0], &tables);
        for level in 0..tables.cfg.levels {
            let idx = tables.corner_index(level, &[0, 0, 0]);
            for k in 0..2 {
                assert_eq!(h[level * 2 + k], tables.features[level][idx * 2 + k]);
            }
        }
    }

    #[test]
    fn encode_of_constant_tables_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tables =
            HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        for lv in tables.features.iter_mut() {
            for (i, v) in lv.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.25 } else { -0.75 };
            }
        }
        for _ in 0..20 {
            let z = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let h = encode_vec(&z, &tables);
            for level in 0..4 {
                assert!((h[level * 2] - 0.25).abs() < 1e-12);
                assert!((h[level * 2 + 1] + 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_at_cell_center_is_corner_mean() {
        // One level, resolution 2, dense indexing: the point at the center of
        // cell (0,0,0) has all weights 1/8.
        let cfg = HashGridConfig {
            levels: 2,
            table_size: 1 << 10,
            feature_dim: 1,
            n_min: 2,
            n_max: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables = HashTables::new(cfg, 3, IndexingMode::DenseForced, 1.0, &mut rng).unwrap();
        let z = [0.25, 0.25, 0.25]; // center of the first cell at level 0 (n=2)
        let h = encode_vec(&z, &tables);
        let mut mean = 0.0;
        for bits in 0..8u32 {
            let corner = [
                (bits & 1) as u64,
                (bits >> 1 & 1) as u64,
                (bits >> 2 & 1) as u64,
            ];
            let idx = tables.corner_index(0, &corner);
            mean += tables.features[0][idx];
        }
        mean /= 8.0;
        assert!((h[0] - mean).abs() < 1e-12);
    }

    /// Independent dense-grid reference: per level keeps an explicit
    /// (n+1)^3 grid and interpolates with plain nested loops. Corners are
    /// visited in the contract order (axis 0 fastest) so results are
    /// bit-comparable.
    fn naive_dense_encode(z: &[f64; 3], grids: &[Vec<f64>], res: &[u32], f_dim: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for (lv, grid) in grids.iter().enumerate() {
            let n = res[lv];
            let n1 = (n + 1) as usize;
            let mut accum = vec![0.0; f_dim];
            let mut cells = [0usize; 3];
            let mut fr = [0.0f64; 3];
            for a in 0..3 {
                let pos = z[a] * n as f64;
                let c = (pos.floor() as i64).clamp(0, n as i64 - 1) as usize;
                cells[a] = c;
                fr[a] = pos - c as f64;
            }
            for dz in 0..2usize {
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                            * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                            * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
                        let gi = (cells[0] + dx) + n1 * ((cells[1] + dy) + n1 * (cells[2] + dz));
                        for k in 0..f_dim {
                            accum[k] += w * grid[gi * f_dim + k];
                        }
                    }
                }
            }
            out.extend(accum);
        }
        out
    }

    #[test]
    fn forced_dense_matches_naive_baseline_bit_for_bit() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tables = HashTables::new(cfg, 3, IndexingMode::DenseForced, 1.0, &mut rng).unwrap();
        // Copy features into explicit per-level dense grids.
        let res = tables.resolutions.clone();
        let f_dim = tables.cfg.feature_dim;
        let grids: Vec<Vec<f64>> = (0..cfg.levels)
            .map(|lv| {
                let n1 = (res[lv] + 1) as usize;
                let mut g = vec![0.0; n1 * n1 * n1 * f_dim];
                for x in 0..n1 as u64 {
                    for y in 0..n1 as u64 {
                        for z in 0..n1 as u64 {
                            let idx = tables.corner_index(lv, &[x, y, z]);
                            let gi = (x as usize) + n1 * ((y as usize) + n1 * (z as usize));
                            for k in 0..f_dim {
                                g[gi * f_dim + k] = tables.features[lv][idx * f_dim + k];
                            }
                        }
                    }
                }
                g
            })
            .collect();
        for _ in 0..200 {
            let z = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let ours = encode_vec(&z, &tables);
            let reference = naive_dense_encode(&z, &grids, &res, f_dim);
            assert_eq!(ours, reference, "at z={z:?}");
        }
    }

    #[test]
    fn encode_is_continuous_across_cell_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tables =
            HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        // Boundaries of the finest level (n=8) are multiples of 1/8.
        for i in 1..8u32 {
            let b = i as f64 / 8.0;
            let lo = encode_vec(&[b - 1e-9, 0.4, 0.6], &tables);
            let hi = encode_vec(&[b + 1e-9, 0.4, 0.6], &tables);
            for (a, b) in lo.iter().zip(hi.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_accumulates_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tables =
            HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        let mut grads = TableGradients::zeros_like(&tables);
        let zero = vec![0.0; tables.output_dim()];
        let mut dz = [0.0; 3];
        encode_backward(&[0.3, 0.5, 0.7], &zero, &tables, &mut grads, Some(&mut dz));
        assert_eq!(dz, [0.0; 3]);
        for lv in 0..grads.num_levels() {
            for i in 0..grads.level_len(lv) {
                assert_eq!(grads.load(lv, i), 0.0);
            }
        }
    }

    #[test]
    fn backward_at_corner_hits_one_entry_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tables =
            HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        let mut grads = TableGradients::zeros_like(&tables);
        let mut up = vec![0.0; tables.output_dim()];
        up.iter_mut().for_each(|u| *u = 1.0);
        encode_backward(&[0.0, 0.0, 0.0], &up, &tables, &mut grads, None);
        for lv in 0..tables.cfg.levels {
            let idx = tables.corner_index(lv, &[0, 0, 0]);
            let mut nonzero = 0;
            for i in 0..grads.level_len(lv) {
                let g = grads.load(lv, i);
                if g != 0.0 {
                    nonzero += 1;
                    assert_eq!(i / tables.cfg.feature_dim, idx);
                    assert_eq!(g, 1.0);
                }
            }
            assert_eq!(nonzero, tables.cfg.feature_dim);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _trial in 0..100 {
            let mut tables =
                HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
            // Keep z away from cell boundaries of every level (n up to 8).
            let z = [
                0.05 + 0.115 * rng.random::<f64>(),
                0.3 + 0.05 * rng.random::<f64>(),
                0.55 + 0.05 * rng.random::<f64>(),
            ];
            let up: Vec<f64> = (0..tables.output_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let loss = |t: &HashTables, z: &[f64]| -> f64 {
                encode_vec(z, t).iter().zip(&up).map(|(h, u)| h * u).sum()
            };

            // dl/dz via central differences.
            let mut grads = TableGradients::zeros_like(&tables);
            let mut dz = [0.0; 3];
            encode_backward(&z, &up, &tables, &mut grads, Some(&mut dz));
            let h = 1e-4;
            for a in 0..3 {
                let mut zp = z;
                zp[a] += h;
                let mut zm = z;
                zm[a] -= h;
                let fd = (loss(&tables, &zp) - loss(&tables, &zm)) / (2.0 * h);
                let denom = dz[a].abs().max(fd.abs()).max(1e-10);
                assert!(
                    ((dz[a] - fd) / denom).abs() < 1e-5,
                    "dz[{a}] {} vs fd {}",
                    dz[a],
                    fd
                );
            }

            // dl/dtheta for a few touched entries.
            let mut checked = 0;
            'outer: for lv in 0..tables.cfg.levels {
                for i in 0..grads.level_len(lv) {
                    let g = grads.load(lv, i);
                    if g == 0.0 {
                        continue;
                    }
                    let orig = tables.features[lv][i];
                    tables.features[lv][i] = orig + h;
                    let fp = loss(&tables, &z);
                    tables.features[lv][i] = orig - h;
                    let fm = loss(&tables, &z);
                    tables.features[lv][i] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let denom = g.abs().max(fd.abs()).max(1e-10);
                    assert!(((g - fd) / denom).abs() < 1e-5, "table grad {g} vs fd {fd}");
                    checked += 1;
                    if checked > 6 {
                        break 'outer;
                    }
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn accumulation_is_thread_order_insensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tables = std::sync::Arc::new(
            HashTables::new(small_cfg(), 3, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap(),
        );
        let points: Vec<([f64; 3], Vec<f64>)> = (0..512)
            .map(|_| {
                let z = [rng.random(), rng.random(), rng.random()];
                let up = (0..tables.output_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                (z, up)
            })
            .collect();

        let mut serial = TableGradients::zeros_like(&tables);
        for (z, up) in &points {
            encode_backward(z, up, &tables, &mut serial, None);
        }

        // Worker-local accumulation merged afterwards: the same contributions
        // in a different summation order.
        let points = std::sync::Arc::new(points);
        let mut handles = Vec::new();
        for t in 0..4 {
            let tables = tables.clone();
            let points = points.clone();
            handles.push(std::thread::spawn(move || {
                let mut local = TableGradients::zeros_like(&tables);
                for (i, (z, up)) in points.iter().enumerate() {
                    if i % 4 == t {
                        encode_backward(z, up, &tables, &mut local, None);
                    }
                }
                local
            }));
        }
        let mut merged = TableGradients::zeros_like(&tables);
        for h in handles {
            merged.add_assign(&h.join().unwrap());
        }
        for lv in 0..serial.num_levels() {
            for i in 0..serial.level_len(lv) {
                assert!(
                    (serial.load(lv, i) - merged.load(lv, i)).abs() < 1e-10,
                    "entry ({lv}, {i})"
                );
            }
        }
    }

    #[test]
    fn dense_forced_rejects_oversized_grids() {
        let cfg = HashGridConfig {
            levels: 2,
            table_size: 1 << 8,
            feature_dim: 2,
            n_min: 4,
            n_max: 16, // (16+1)^3 = 4913 > 256
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        match HashTables::new(cfg, 3, IndexingMode::DenseForced, 1.0, &mut rng) {
            Err(EncodingError::DenseDoesNotFit { level, .. }) => assert_eq!(level, 1),
            other => panic!("expected DenseDoesNotFit, got {other:?}"),
        }
    }

    #[test]
    fn four_dimensional_inputs_are_supported() {
        let cfg = HashGridConfig {
            levels: 3,
            table_size: 1 << 12,
            feature_dim: 2,
            n_min: 2,
            n_max: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tables = HashTables::new(cfg, 4, IndexingMode::HashedAuto, 1.0, &mut rng).unwrap();
        let h = encode_vec(&[0.1, 0.9, 0.4, 0.5], &tables);
        assert_eq!(h.len(), 6);
        assert!(h.iter().all(|v| v.is_finite()));
        // Level 0 (n=2): 3^4 = 81 <= 4096, dense; finest (n=8): 9^4 = 6561 hashed.
        assert!(tables.dense_level[0]);
        assert!(!tables.dense_level[2]);
    }
}
