//! The learnable field: a radiance MLP over hash-encoded intrinsic
//! coordinates, plus an offset MLP with per-frame latent codes and its own
//! hash encoder. Forward and backward passes are hand-derived; the Adam
//! driver updates every parameter tensor in a fixed order.

use crate::encoding::{
    self, encode, encode_backward, EncodingError, HashGridConfig, HashTables, IndexingMode,
    TableGradients,
};
use crate::geom::Vec3;
use crate::intrinsic::{
    apply_offset, uv_d_sample, xyz_d_sample, DistanceSquash, IntrinsicCoord, IntrinsicSample,
    SequenceQueries, TemplateNormalizer,
};
use crate::mlp::{
    adam_step_tensor, sigmoid, softplus, AdamMoments, Mlp, MlpCache, MlpError, MlpGradients,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordKind {
    UvD,
    XyzD,
}

impl CoordKind {
    pub fn dim(self) -> usize {
        match self {
            CoordKind::UvD => 3,
            CoordKind::XyzD => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub coord: CoordKind,
    pub hash: HashGridConfig,
    /// Encoder configuration of the offset field; the correction it learns
    /// is low-frequency, so this can be much smaller than the main grid.
    pub offset_hash: HashGridConfig,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub latent_dim: usize,
    /// Componentwise bound of the learned offset inside the unit grid.
    pub offset_scale: f64,
    pub offsets_enabled: bool,
    pub indexing: IndexingMode,
    pub n_frames: usize,
    pub table_init_scale: f64,
}

impl FieldConfig {
    pub fn defaults(coord: CoordKind, n_frames: usize) -> FieldConfig {
        FieldConfig {
            coord,
            hash: HashGridConfig::default(),
            offset_hash: HashGridConfig::default(),
            hidden_dim: 64,
            hidden_layers: 2,
            latent_dim: 8,
            offset_scale: 0.05,
            offsets_enabled: true,
            indexing: IndexingMode::HashedAuto,
            n_frames,
            table_init_scale: 1e-4,
        }
    }
}

/// Density and radiance at one intrinsic coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    /// Non-negative density, units of inverse scene length.
    pub density: f64,
    /// Radiance in [0,1]^3.
    pub color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct NeuralField {
    pub cfg: FieldConfig,
    pub main_tables: HashTables,
    pub offset_tables: HashTables,
    /// Hash features -> (density, rgb) heads.
    pub radiance_mlp: Mlp,
    /// Hash features ++ frame latent -> bounded coordinate offset.
    pub offset_mlp: Mlp,
    /// `n_frames * latent_dim` learnable frame codes.
    pub latents: Vec<f64>,
}

impl NeuralField {
    /// Initializes all parameters from the rng in a fixed draw order, with
    /// the offset head zeroed so training starts from the pure intrinsic
    /// mapping.
    pub fn init(cfg: FieldConfig, rng: &mut impl Rng) -> Result<NeuralField, EncodingError> {
        let dim = cfg.coord.dim();
        let main_tables = HashTables::new(cfg.hash, dim, cfg.indexing, cfg.table_init_scale, rng)?;
        let offset_tables =
            HashTables::new(cfg.offset_hash, dim, cfg.indexing, cfg.table_init_scale, rng)?;
        let radiance_mlp = Mlp::new(cfg.hash.output_dim(), cfg.hidden_dim, cfg.hidden_layers, 4, rng);
        let mut offset_mlp = Mlp::new(
            cfg.offset_hash.output_dim() + cfg.latent_dim,
            cfg.hidden_dim,
            cfg.hidden_layers,
            dim,
            rng,
        );
        offset_mlp.zero_final_layer();
        let latents = (0..cfg.n_frames * cfg.latent_dim)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Ok(NeuralField {
            cfg,
            main_tables,
            offset_tables,
            radiance_mlp,
            offset_mlp,
            latents,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.coord.dim()
    }

    pub fn latent(&self, t: usize) -> &[f64] {
        &self.latents[t * self.cfg.latent_dim..(t + 1) * self.cfg.latent_dim]
    }

    /// The learned offset at an intrinsic coordinate for frame `t`:
    /// `tanh(mlp(enc(r) ++ e_t)) * offset_scale`, componentwise bounded.
    pub fn offset_field(&self, r: &IntrinsicCoord, t: usize) -> Vec<f64> {
        let mut state = self.make_sample_state();
        self.forward_sample(r.as_slice(), t, &mut state);
        state.delta[..self.dim()].to_vec()
    }

    /// Density and color of an intrinsic coordinate; no view direction.
    pub fn radiance_field(&self, r: &IntrinsicCoord) -> FieldOutput {
        let mut enc = vec![0.0; self.main_tables.output_dim()];
        encode(r.as_slice(), &self.main_tables, &mut enc);
        let mut cache = self.radiance_mlp.make_cache();
        let raw = self.radiance_mlp.forward_cached(&enc, &mut cache);
        FieldOutput {
            density: softplus(raw[0]),
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
        }
    }

    /// Full composition for a Euclidean point at frame `t`.
    pub fn field_at_point(&self, x: Vec3, t: usize, geom: &GeometryContext) -> FieldOutput {
        let sample = geom.intrinsic(x, t, self.cfg.coord);
        let mut state = self.make_sample_state();
        self.forward_sample(sample.coord.as_slice(), t, &mut state);
        FieldOutput {
            density: state.sigma,
            color: state.color,
        }
    }

    pub fn make_sample_state(&self) -> SampleState {
        let enc_dim = self.main_tables.output_dim();
        let off_dim = self.offset_tables.output_dim();
        SampleState {
            frame: 0,
            dim: self.dim(),
            coord: [0.0; 4],
            enc_off: vec![0.0; off_dim],
            off_in: vec![0.0; off_dim + self.cfg.latent_dim],
            off_cache: self.offset_mlp.make_cache(),
            tanh_val: [0.0; 4],
            delta: [0.0; 4],
            coord_c: [0.0; 4],
            clamp_pass: [false; 4],
            enc_main: vec![0.0; enc_dim],
            rad_cache: self.radiance_mlp.make_cache(),
            sigma_raw: 0.0,
            sigma: 0.0,
            color_raw: [0.0; 3],
            color: [0.0; 3],
        }
    }

    /// Cached forward pass through offset and radiance networks. `r` is the
    /// intrinsic coordinate of the sample; everything needed by
    /// `backward_sample` is retained in `state`.
    pub fn forward_sample(&self, r: &[f64], t: usize, state: &mut SampleState) {
        let dim = self.dim();
        debug_assert_eq!(r.len(), dim);
        state.frame = t;
        state.coord[..dim].copy_from_slice(r);

        if self.cfg.offsets_enabled {
            encode(r, &self.offset_tables, &mut state.enc_off);
            let enc_dim = state.enc_off.len();
            state.off_in[..enc_dim].copy_from_slice(&state.enc_off);
            state.off_in[enc_dim..].copy_from_slice(self.latent(t));
            let raw = self.offset_mlp.forward_cached(&state.off_in, &mut state.off_cache);
            for a in 0..dim {
                let th = raw[a].tanh();
                state.tanh_val[a] = th;
                state.delta[a] = th * self.cfg.offset_scale;
            }
        } else {
            state.delta[..dim].fill(0.0);
            state.tanh_val[..dim].fill(0.0);
        }

        for a in 0..dim {
            let sum = state.coord[a] + state.delta[a];
            state.coord_c[a] = sum.clamp(0.0, 1.0);
            state.clamp_pass[a] = sum > 0.0 && sum < 1.0;
        }

        encode(&state.coord_c[..dim], &self.main_tables, &mut state.enc_main);
        let raw = self.radiance_mlp.forward_cached(&state.enc_main, &mut state.rad_cache);
        state.sigma_raw = raw[0];
        state.sigma = softplus(raw[0]);
        for k in 0..3 {
            state.color_raw[k] = raw[k + 1];
            state.color[k] = sigmoid(raw[k + 1]);
        }
    }

    /// Backward pass for one sample. `d_sigma`/`d_color` are loss gradients
    /// of the head outputs; `d_delta_extra` is the direct gradient on the
    /// offset output (the offset-regularization term), length `dim`.
    /// Everything accumulates into the caller's buffers; workers keep their
    /// own and merge afterwards.
    pub fn backward_sample(
        &self,
        state: &SampleState,
        d_sigma: f64,
        d_color: [f64; 3],
        d_delta_extra: &[f64],
        tables: &mut TableGradPair,
        dense: &mut DenseGrads,
        scratch: &mut BackwardScratch,
    ) {
        let dim = self.dim();
        // Heads.
        let mut d_raw = [0.0; 4];
        d_raw[0] = d_sigma * sigmoid(state.sigma_raw);
        for k in 0..3 {
            let c = state.color[k];
            d_raw[k + 1] = d_color[k] * c * (1.0 - c);
        }
        // Radiance MLP and main encoder. The coordinate gradient is only
        // needed when it can flow into the offset network.
        self.radiance_mlp.backward_scratched(
            &state.rad_cache,
            &d_raw,
            &mut dense.radiance_mlp,
            &mut scratch.d_enc_main,
            &mut scratch.mlp,
        );
        encode_backward(
            &state.coord_c[..dim],
            &scratch.d_enc_main,
            &self.main_tables,
            &mut tables.main,
            if self.cfg.offsets_enabled {
                Some(&mut scratch.d_coord_c[..dim])
            } else {
                None
            },
        );

        if !self.cfg.offsets_enabled {
            return;
        }
        // Through the clamp and the tanh bound into the offset MLP.
        let mut d_tanh_raw = [0.0; 4];
        let mut any = false;
        for a in 0..dim {
            let d_delta = if state.clamp_pass[a] {
                scratch.d_coord_c[a]
            } else {
                0.0
            } + d_delta_extra[a];
            let th = state.tanh_val[a];
            d_tanh_raw[a] = d_delta * self.cfg.offset_scale * (1.0 - th * th);
            any |= d_tanh_raw[a] != 0.0;
        }
        if !any {
            return;
        }
        self.offset_mlp.backward_scratched(
            &state.off_cache,
            &d_tanh_raw[..dim],
            &mut dense.offset_mlp,
            &mut scratch.d_off_in,
            &mut scratch.mlp,
        );
        let enc_dim = state.enc_off.len();
        encode_backward(
            &state.coord[..dim],
            &scratch.d_off_in[..enc_dim],
            &self.offset_tables,
            &mut tables.offset,
            None,
        );
        let lat = &mut dense.latents
            [state.frame * self.cfg.latent_dim..(state.frame + 1) * self.cfg.latent_dim];
        for (g, d) in lat.iter_mut().zip(&scratch.d_off_in[enc_dim..]) {
            *g += d;
        }
    }

    /// Identifier of the piecewise-linear region the sample's forward pass
    /// ran in: encoder cells, ReLU signs and clamp states. Finite-difference
    /// probes are only valid when this signature is unchanged.
    pub fn region_signature(&self, state: &SampleState, out: &mut Vec<u64>) {
        let dim = self.dim();
        encoding::cell_signature(&state.coord_c[..dim], &self.main_tables, out);
        let mut bits = Vec::new();
        self.radiance_mlp.relu_signature(&state.rad_cache, &mut bits);
        if self.cfg.offsets_enabled {
            encoding::cell_signature(&state.coord[..dim], &self.offset_tables, out);
            self.offset_mlp.relu_signature(&state.off_cache, &mut bits);
        }
        out.extend(bits.iter().map(|&b| b as u64));
        for a in 0..dim {
            out.push(state.clamp_pass[a] as u64);
        }
    }
}

/// Cached intermediates of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub frame: usize,
    pub dim: usize,
    pub coord: [f64; 4],
    pub enc_off: Vec<f64>,
    pub off_in: Vec<f64>,
    pub off_cache: MlpCache,
    pub tanh_val: [f64; 4],
    pub delta: [f64; 4],
    pub coord_c: [f64; 4],
    pub clamp_pass: [bool; 4],
    pub enc_main: Vec<f64>,
    pub rad_cache: MlpCache,
    pub sigma_raw: f64,
    pub sigma: f64,
    pub color_raw: [f64; 3],
    pub color: [f64; 3],
}

/// Reusable backward buffers.
#[derive(Debug, Clone)]
pub struct BackwardScratch {
    pub d_enc_main: Vec<f64>,
    pub d_coord_c: [f64; 4],
    pub d_off_in: Vec<f64>,
    pub mlp: crate::mlp::MlpBackScratch,
}

impl BackwardScratch {
    pub fn for_field(field: &NeuralField) -> BackwardScratch {
        BackwardScratch {
            d_enc_main: vec![0.0; field.main_tables.output_dim()],
            d_coord_c: [0.0; 4],
            d_off_in: vec![0.0; field.offset_tables.output_dim() + field.cfg.latent_dim],
            mlp: crate::mlp::MlpBackScratch::default(),
        }
    }
}

/// Gradient buffers for both encoders.
#[derive(Debug, Clone)]
pub struct TableGradPair {
    pub main: TableGradients,
    pub offset: TableGradients,
}

impl TableGradPair {
    pub fn zeros_like(field: &NeuralField) -> TableGradPair {
        TableGradPair {
            main: TableGradients::zeros_like(&field.main_tables),
            offset: TableGradients::zeros_like(&field.offset_tables),
        }
    }

    pub fn clear(&mut self) {
        self.main.clear();
        self.offset.clear();
    }

    pub fn add_assign(&mut self, other: &TableGradPair) {
        self.main.add_assign(&other.main);
        self.offset.add_assign(&other.offset);
    }
}

/// Plain gradient buffers for the MLPs and latents; per-worker copies are
/// merged in chunk order so the result is independent of thread count.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub radiance_mlp: MlpGradients,
    pub offset_mlp: MlpGradients,
    pub latents: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(field: &NeuralField) -> DenseGrads {
        DenseGrads {
            radiance_mlp: MlpGradients::zeros_like(&field.radiance_mlp),
            offset_mlp: MlpGradients::zeros_like(&field.offset_mlp),
            latents: vec![0.0; field.latents.len()],
        }
    }

    pub fn clear(&mut self) {
        self.radiance_mlp.clear();
        self.offset_mlp.clear();
        self.latents.fill(0.0);
    }

    pub fn add_assign(&mut self, other: &DenseGrads) {
        self.radiance_mlp.add_assign(&other.radiance_mlp);
        self.offset_mlp.add_assign(&other.offset_mlp);
        for (a, b) in self.latents.iter_mut().zip(&other.latents) {
            *a += b;
        }
    }
}

/// All gradients of one iteration.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub tables: TableGradPair,
    pub dense: DenseGrads,
}

impl FieldGradients {
    pub fn zeros_like(field: &NeuralField) -> FieldGradients {
        FieldGradients {
            tables: TableGradPair::zeros_like(field),
            dense: DenseGrads::zeros_like(field),
        }
    }

    pub fn clear(&mut self) {
        self.tables.clear();
        self.dense.clear();
    }

    pub fn add_assign(&mut self, other: &FieldGradients) {
        self.tables.add_assign(&other.tables);
        self.dense.add_assign(&other.dense);
    }
}

/// Per-tensor gradient reads for the optimizer; lets Adam stream either one
/// buffer or the sum of several worker buffers without a merge pass.
pub trait GradientSource {
    fn main_table(&self, level: usize, i: usize) -> f64;
    fn offset_table(&self, level: usize, i: usize) -> f64;
    fn mlp_w(&self, which: MlpSlot, layer: usize, i: usize) -> f64;
    fn mlp_b(&self, which: MlpSlot, layer: usize, i: usize) -> f64;
    fn latent(&self, i: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpSlot {
    Radiance,
    Offset,
}

impl GradientSource for FieldGradients {
    #[inline]
    fn main_table(&self, level: usize, i: usize) -> f64 {
        self.tables.main.load(level, i)
    }

    #[inline]
    fn offset_table(&self, level: usize, i: usize) -> f64 {
        self.tables.offset.load(level, i)
    }

    #[inline]
    fn mlp_w(&self, which: MlpSlot, layer: usize, i: usize) -> f64 {
        match which {
            MlpSlot::Radiance => self.dense.radiance_mlp.weights[layer][i],
            MlpSlot::Offset => self.dense.offset_mlp.weights[layer][i],
        }
    }

    #[inline]
    fn mlp_b(&self, which: MlpSlot, layer: usize, i: usize) -> f64 {
        match which {
            MlpSlot::Radiance => self.dense.radiance_mlp.bias[layer][i],
            MlpSlot::Offset => self.dense.offset_mlp.bias[layer][i],
        }
    }

    #[inline]
    fn latent(&self, i: usize) -> f64 {
        self.dense.latents[i]
    }
}

/// Sums gradients across worker buffers on the fly.
pub struct SummedGrads<'a> {
    pub workers: Vec<&'a FieldGradients>,
}

impl GradientSource for SummedGrads<'_> {
    #[inline]
    fn main_table(&self, level: usize, i: usize) -> f64 {
        self.workers.iter().map(|w| w.tables.main.load(level, i)).sum()
    }

    #[inline]
    fn offset_table(&self, level: usize, i: usize) -> f64 {
        self.workers.iter().map(|w| w.tables.offset.load(level, i)).sum()
    }

    #[inline]
    fn mlp_w(&self, which: MlpSlot, layer: usize, i: usize) -> f64 {
        self.workers.iter().map(|w| w.mlp_w(which, layer, i)).sum()
    }

    #[inline]
    fn mlp_b(&self, which: MlpSlot, layer: usize, i: usize) -> f64 {
        self.workers.iter().map(|w| w.mlp_b(which, layer, i)).sum()
    }

    #[inline]
    fn latent(&self, i: usize) -> f64 {
        self.workers.iter().map(|w| w.latent(i)).sum()
    }
}

/// Adam optimizer state for every tensor of a field, in a fixed order:
/// main table levels, offset table levels, radiance MLP (w, b per layer),
/// offset MLP (w, b per layer), latents.
#[derive(Debug, Clone)]
pub struct FieldAdam {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: Vec<AdamMoments>,
}

impl FieldAdam {
    pub fn new(field: &NeuralField) -> FieldAdam {
        let mut moments = Vec::new();
        for lv in &field.main_tables.features {
            moments.push(AdamMoments::zeros(lv.len()));
        }
        for lv in &field.offset_tables.features {
            moments.push(AdamMoments::zeros(lv.len()));
        }
        for mlp in [&field.radiance_mlp, &field.offset_mlp] {
            for layer in &mlp.layers {
                moments.push(AdamMoments::zeros(layer.weights.len()));
                moments.push(AdamMoments::zeros(layer.bias.len()));
            }
        }
        moments.push(AdamMoments::zeros(field.latents.len()));
        FieldAdam {
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            moments,
        }
    }

    /// One Adam step over every tensor; gradients are left untouched (the
    /// caller clears them).
    pub fn step(
        &mut self,
        field: &mut NeuralField,
        grads: &impl GradientSource,
        lr: f64,
    ) -> Result<(), MlpError> {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        for (lv, params) in field.main_tables.features.iter_mut().enumerate() {
            adam_step_tensor(params, &mut self.moments[idx], t, lr, b1, b2, eps, |i| {
                grads.main_table(lv, i)
            })?;
            idx += 1;
        }
        for (lv, params) in field.offset_tables.features.iter_mut().enumerate() {
            adam_step_tensor(params, &mut self.moments[idx], t, lr, b1, b2, eps, |i| {
                grads.offset_table(lv, i)
            })?;
            idx += 1;
        }
        for (mlp, slot) in [
            (&mut field.radiance_mlp, MlpSlot::Radiance),
            (&mut field.offset_mlp, MlpSlot::Offset),
        ] {
            for (l, layer) in mlp.layers.iter_mut().enumerate() {
                adam_step_tensor(&mut layer.weights, &mut self.moments[idx], t, lr, b1, b2, eps, |i| {
                    grads.mlp_w(slot, l, i)
                })?;
                idx += 1;
                adam_step_tensor(&mut layer.bias, &mut self.moments[idx], t, lr, b1, b2, eps, |i| {
                    grads.mlp_b(slot, l, i)
                })?;
                idx += 1;
            }
        }
        adam_step_tensor(&mut field.latents, &mut self.moments[idx], t, lr, b1, b2, eps, |i| {
            grads.latent(i)
        })?;
        Ok(())
    }
}

/// Geometry needed to map Euclidean points into the intrinsic grid: the
/// proxy sequence with its BVHs, the distance squash and (for XYZ-D) the
/// template normalizer.
pub struct GeometryContext<'a> {
    pub queries: &'a SequenceQueries,
    pub squash: DistanceSquash,
    pub normalizer: TemplateNormalizer,
}

impl<'a> GeometryContext<'a> {
    pub fn new(queries: &'a SequenceQueries, squash: DistanceSquash, normalizer: TemplateNormalizer) -> Self {
        GeometryContext {
            queries,
            squash,
            normalizer,
        }
    }

    /// Conventional context for a sequence: squash and normalizer derived
    /// from the template bounding box.
    pub fn for_sequence(queries: &'a SequenceQueries) -> Self {
        let bounds = queries.seq.template().bounds();
        GeometryContext {
            queries,
            squash: DistanceSquash::for_diagonal(bounds.diagonal()),
            normalizer: TemplateNormalizer::for_template_bounds(&bounds),
        }
    }

    pub fn intrinsic(&self, x: Vec3, t: usize, kind: CoordKind) -> IntrinsicSample {
        match kind {
            CoordKind::UvD => uv_d_sample(x, t, self.queries, &self.squash),
            CoordKind::XyzD => xyz_d_sample(x, t, self.queries, &self.normalizer, &self.squash),
        }
    }
}

/// Convenience wrapper making `_ = r + offset` explicit for callers that hold
/// an `IntrinsicCoord`.
pub fn offset_coord(field: &NeuralField, r: &IntrinsicCoord, t: usize) -> IntrinsicCoord {
    if field.cfg.offsets_enabled {
        let delta = field.offset_field(r, t);
        apply_offset(r, &delta)
    } else {
        *r
    }
}
