//! Tiny fully-connected networks with hand-derived backpropagation, plus the
//! Adam update rule. No autodiff framework; gradients are verified against
//! finite differences in the test suites.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("shape mismatch: parameter len {param} vs gradient len {grad}")]
    ShapeMismatch { param: usize, grad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Dot product with four independent accumulators; breaks the FP dependency
/// chain so the loop pipelines and vectorizes. `chunks_exact` keeps the body
/// free of bounds checks.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// One dense layer, `y = act(W x + b)`. Weights are row-major, one contiguous
/// row per output unit.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Dense {
        // He-uniform fan-in initialization; biases start at zero.
        let limit = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize, activation: Activation) -> Dense {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Reusable forward cache: layer inputs and pre-activations. Shape-matched to
/// one `Mlp`; create once per worker and reuse across samples.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// inputs[l] is the input vector of layer l; inputs[L] is the output.
    pub inputs: Vec<Vec<f64>>,
    /// pre[l] is the pre-activation of layer l.
    pub pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Hidden-layer stack with ReLU activations and a linear head.
    pub fn new(
        in_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Mlp {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for _ in 0..hidden_layers {
            layers.push(Dense::new(prev, hidden_dim, Activation::Relu, rng));
            prev = hidden_dim;
        }
        layers.push(Dense::new(prev, out_dim, Activation::Linear, rng));
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Replaces the final layer with zeros so the network outputs exactly 0
    /// until the first optimizer step.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("mlp has layers");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn make_cache(&self) -> MlpCache {
        MlpCache {
            inputs: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.in_dim])
                .chain(std::iter::once(vec![0.0; self.out_dim()]))
                .collect(),
            pre: self.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    /// Forward pass, recording inputs and pre-activations for backward.
    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        assert_eq!(x.len(), self.in_dim());
        cache.inputs[0].copy_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = cache.inputs.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0];
            let pre = &mut cache.pre[l];
            for (o, (row, b)) in layer
                .weights
                .chunks_exact(layer.in_dim)
                .zip(&layer.bias)
                .enumerate()
            {
                let acc = *b + dot(row, input);
                pre[o] = acc;
                output[o] = match layer.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Linear => acc,
                };
            }
        }
        cache.inputs.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = self.make_cache();
        self.forward_cached(x, &mut cache).to_vec()
    }

    /// Backward pass given dL/d(output). Accumulates into `grads` and writes
    /// dL/d(input) into `dx`. `scratch` provides reusable delta buffers so
    /// the hot path allocates nothing.
    pub fn backward_scratched(
        &self,
        cache: &MlpCache,
        dy: &[f64],
        grads: &mut MlpGradients,
        dx: &mut [f64],
        scratch: &mut MlpBackScratch,
    ) {
        assert_eq!(dy.len(), self.out_dim());
        assert_eq!(dx.len(), self.in_dim());
        scratch.a.clear();
        scratch.a.extend_from_slice(dy);
        let mut use_a = true;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (delta, next_delta) = if use_a {
                (&mut scratch.a, &mut scratch.b)
            } else {
                (&mut scratch.b, &mut scratch.a)
            };
            // Through the activation.
            if layer.activation == Activation::Relu {
                for (d, &p) in delta.iter_mut().zip(&cache.pre[l]) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let n = layer.in_dim;
            let input = &cache.inputs[l][..n];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            next_delta.clear();
            next_delta.resize(n, 0.0);
            let nd = &mut next_delta[..n];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    let row = &layer.weights[o * n..(o + 1) * n];
                    let grow = &mut gw[o * n..(o + 1) * n];
                    for i in 0..n {
                        grow[i] += d * input[i];
                        nd[i] += d * row[i];
                    }
                }
            }
            use_a = !use_a;
        }
        let delta = if use_a { &scratch.a } else { &scratch.b };
        dx.copy_from_slice(delta);
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut MlpGradients, dx: &mut [f64]) {
        let mut scratch = MlpBackScratch::default();
        self.backward_scratched(cache, dy, grads, dx, &mut scratch);
    }

    /// Sign pattern of every ReLU unit in the cached forward pass; used to
    /// confirm finite-difference probes stayed in one linear region.
    pub fn relu_signature(&self, cache: &MlpCache, out: &mut Vec<u8>) {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.activation == Activation::Relu {
                for &p in &cache.pre[l] {
                    out.push((p > 0.0) as u8);
                }
            }
        }
    }
}

/// Reusable ping-pong delta buffers for `backward_scratched`.
#[derive(Debug, Clone, Default)]
pub struct MlpBackScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Gradient buffers mirroring an `Mlp`'s parameters.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> MlpGradients {
        MlpGradients {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.bias {
            b.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Adam first/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> AdamMoments {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-15;

/// One bias-corrected Adam update over a flat tensor. `grad_at(i)` supplies
/// the gradient so callers can stream from atomic accumulators without a
/// copy. `step` is the 1-based step count after increment.
pub fn adam_step_tensor(
    param: &mut [f64],
    moments: &mut AdamMoments,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    grad_at: impl Fn(usize) -> f64,
) -> Result<(), MlpError> {
    if param.len() != moments.m.len() {
        return Err(MlpError::ShapeMismatch {
            param: param.len(),
            grad: moments.m.len(),
        });
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad_at(i);
        let m = beta1 * moments.m[i] + (1.0 - beta1) * g;
        let v = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Exponential learning-rate decay from `lr_start` at iteration 0 to `lr_end`
/// at iteration `total - 1`.
pub fn lr_schedule(lr_start: f64, lr_end: f64, iter: u64, total: u64) -> f64 {
    if total <= 1 {
        return lr_start;
    }
    let t = iter as f64 / (total - 1) as f64;
    lr_start * (lr_end / lr_start).powf(t)
}

/// Numerically stable softplus and its derivative (the logistic sigmoid).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    let t = (-x.abs()).exp();
    let p = t / (1.0 + t);
    if x >= 0.0 {
        1.0 - p
    } else {
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_computation() {
        let mut mlp = Mlp {
            layers: vec![Dense::zeroed(2, 2, Activation::Relu), Dense::zeroed(2, 1, Activation::Linear)],
        };
        mlp.layers[0].weights = vec![1.0, -1.0, 0.5, 0.5];
        mlp.layers[0].bias = vec![0.0, -0.2];
        mlp.layers[1].weights = vec![2.0, 3.0];
        mlp.layers[1].bias = vec![0.1];
        let y = mlp.forward(&[1.0, 0.5]);
        // hidden = relu([0.5, 0.55]) = [0.5, 0.55]; out = 0.1 + 1.0 + 1.65
        assert!((y[0] - 2.75).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut mlp = Mlp::new(5, 16, 2, 3, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |m: &Mlp, x: &[f64]| -> f64 {
                m.forward(x).iter().zip(&dy).map(|(a, b)| a * b).sum()
            };

            let mut cache = mlp.make_cache();
            mlp.forward_cached(&x, &mut cache);
            let mut grads = MlpGradients::zeros_like(&mlp);
            let mut dx = vec![0.0; 5];
            mlp.backward(&cache, &dy, &mut grads, &mut dx);

            let h = 1e-6;
            // dx
            for i in 0..5 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
                let denom = dx[i].abs().max(fd.abs()).max(1e-9);
                assert!(((dx[i] - fd) / denom).abs() < 1e-6, "dx[{i}]: {} vs {}", dx[i], fd);
            }
            // a few weights per layer
            for l in 0..mlp.layers.len() {
                for wi in [0usize, 7, 13] {
                    if wi >= mlp.layers[l].weights.len() {
                        continue;
                    }
                    let orig = mlp.layers[l].weights[wi];
                    mlp.layers[l].weights[wi] = orig + h;
                    let fp = loss(&mlp, &x);
                    mlp.layers[l].weights[wi] = orig - h;
                    let fm = loss(&mlp, &x);
                    mlp.layers[l].weights[wi] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let g = grads.weights[l][wi];
                    let denom = g.abs().max(fd.abs()).max(1e-9);
                    assert!(((g - fd) / denom).abs() < 1e-5, "w[{l}][{wi}]: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn adam_first_step_matches_scalar_reference() {
        // Hand-rolled scalar Adam for one step with g = 1, lr = 1e-3.
        let (b1, b2, eps) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        let g = 1.0;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected_delta = -1e-3 * m_hat / (v_hat.sqrt() + eps);

        let mut param = vec![0.5];
        let mut moments = AdamMoments::zeros(1);
        adam_step_tensor(&mut param, &mut moments, 1, 1e-3, b1, b2, eps, |_| 1.0).unwrap();
        assert!((param[0] - (0.5 + expected_delta)).abs() < 1e-15);
        // The update is ~ -lr for g=1 at step 1.
        assert!((expected_delta + 1e-3).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_fresh_params() {
        let mut param = vec![0.25, -0.5];
        let mut moments = AdamMoments::zeros(2);
        adam_step_tensor(&mut param, &mut moments, 1, 1e-2, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, |_| 0.0)
            .unwrap();
        assert_eq!(param, vec![0.25, -0.5]);
    }

    #[test]
    fn adam_zero_lr_changes_nothing() {
        let mut param = vec![0.25, -0.5];
        let mut moments = AdamMoments::zeros(2);
        moments.m = vec![0.3, 0.4];
        moments.v = vec![0.1, 0.2];
        adam_step_tensor(&mut param, &mut moments, 5, 0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, |_| 1.0)
            .unwrap();
        assert_eq!(param, vec![0.25, -0.5]);
    }

    #[test]
    fn adam_shape_mismatch_is_an_error() {
        let mut param = vec![0.0; 3];
        let mut moments = AdamMoments::zeros(2);
        assert!(adam_step_tensor(
            &mut param,
            &mut moments,
            1,
            1e-3,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            |_| 0.0
        )
        .is_err());
    }

    #[test]
    fn lr_schedule_hits_both_endpoints() {
        let total = 3000;
        assert!((lr_schedule(2e-3, 2e-5, 0, total) - 2e-3).abs() < 1e-9);
        assert!((lr_schedule(2e-3, 2e-5, total - 1, total) - 2e-5).abs() < 1e-9);
        // Monotone decay in between.
        let mid = lr_schedule(2e-3, 2e-5, total / 2, total);
        assert!(mid < 2e-3 && mid > 2e-5);
    }

    #[test]
    fn stable_activations() {
        assert!((softplus(0.0) - (2.0_f64).ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(40.0) <= 1.0 && sigmoid(40.0) > 0.9999999);
        assert!(sigmoid(-40.0) >= 0.0 && sigmoid(-40.0) < 1e-7);
    }
}
