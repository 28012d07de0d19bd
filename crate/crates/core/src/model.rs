//! A small U-Net-style segmenter with manual backpropagation, AdamW, a
//! reduce-on-plateau schedule, and an in-memory training loop.
//!
//! Architecture (all convolutions zero-padded, spatial size preserved):
//! two 3×3 convs 3→16→16 with ReLU, 2×2 max pool, two 3×3 convs 16→32→32
//! with ReLU, nearest ×2 upsample, skip concat (16+32=48), two 3×3 convs
//! 48→16→16 with ReLU, and a 1×1 head to C logits.
//!
//! Math runs in f64; checkpoints store f32 tensors and the trainer rounds
//! its state through f32 at every epoch boundary, so resuming from a saved
//! checkpoint reproduces the continued run bit for bit.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::fusion::{majority_vote, SoftLabelMap};
use crate::imaging::{self, RasterImage};
use crate::inference::TilePredictor;
use crate::math;
use crate::objectives::{self, LossId, LossValueGrad, TreeBase};
use crate::ontology::{Level, Ontology};
use crate::rng::rng_for_index;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    OddSpatialDims { height: usize, width: usize },
    ShapeMismatch { expected: usize, got: usize },
    EmptySplit { split: &'static str },
    NonFiniteLoss { epoch: usize, step: usize },
    BadConfig(String),
    CheckpointMismatch(String),
    Objective(objectives::ObjectiveError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::OddSpatialDims { height, width } => {
                write!(f, "spatial dims {height}x{width} must be divisible by 2")
            }
            ModelError::ShapeMismatch { expected, got } => {
                write!(f, "buffer length {got}, expected {expected}")
            }
            ModelError::EmptySplit { split } => write!(f, "{split} split is empty"),
            ModelError::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}")
            }
            ModelError::BadConfig(msg) => write!(f, "bad config: {msg}"),
            ModelError::CheckpointMismatch(msg) => write!(f, "checkpoint mismatch: {msg}"),
            ModelError::Objective(e) => write!(f, "objective: {e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<objectives::ObjectiveError> for ModelError {
    fn from(e: objectives::ObjectiveError) -> Self {
        ModelError::Objective(e)
    }
}

/// Zero-padded stride-1 convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// [out][in][kh][kw]
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn he_uniform(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Conv2d {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = math::sqrt(6.0 / fan_in);
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    /// input [n][ci][h][w] -> output [n][co][h][w].
    fn forward(&self, input: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = k / 2;
        let mut out = vec![0.0f64; n * self.out_channels * h * w];
        for img in 0..n {
            for co in 0..self.out_channels {
                let out_plane = &mut out[(img * self.out_channels + co) * h * w..][..h * w];
                out_plane.fill(self.bias[co]);
                for ci in 0..self.in_channels {
                    let in_plane = &input[(img * self.in_channels + ci) * h * w..][..h * w];
                    for kh in 0..k {
                        for kw in 0..k {
                            let weight =
                                self.weight[((co * self.in_channels + ci) * k + kh) * k + kw];
                            if weight == 0.0 {
                                continue;
                            }
                            let dy = kh as i64 - pad as i64;
                            let dx = kw as i64 - pad as i64;
                            let oy_start = (-dy).max(0) as usize;
                            let oy_end = ((h as i64 - dy).min(h as i64)) as usize;
                            let ox_start = (-dx).max(0) as usize;
                            let ox_end = ((w as i64 - dx).min(w as i64)) as usize;
                            for oy in oy_start..oy_end {
                                let iy = (oy as i64 + dy) as usize;
                                let dst = &mut out_plane[oy * w + ox_start..oy * w + ox_end];
                                let src = &in_plane[iy * w + (ox_start as i64 + dx) as usize..];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += weight * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of input, weight, and bias from the output gradient.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        n: usize,
        h: usize,
        w: usize,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Vec<f64> {
        let k = self.kernel;
        let pad = k / 2;
        let mut grad_in = vec![0.0f64; n * self.in_channels * h * w];
        for img in 0..n {
            for co in 0..self.out_channels {
                let g_plane = &grad_out[(img * self.out_channels + co) * h * w..][..h * w];
                grad_bias[co] += g_plane.iter().sum::<f64>();
                for ci in 0..self.in_channels {
                    let in_plane = &input[(img * self.in_channels + ci) * h * w..][..h * w];
                    let gi_plane = &mut grad_in[(img * self.in_channels + ci) * h * w..][..h * w];
                    for kh in 0..k {
                        for kw in 0..k {
                            let widx = ((co * self.in_channels + ci) * k + kh) * k + kw;
                            let weight = self.weight[widx];
                            let dy = kh as i64 - pad as i64;
                            let dx = kw as i64 - pad as i64;
                            let oy_start = (-dy).max(0) as usize;
                            let oy_end = ((h as i64 - dy).min(h as i64)) as usize;
                            let ox_start = (-dx).max(0) as usize;
                            let ox_end = ((w as i64 - dx).min(w as i64)) as usize;
                            let mut w_acc = 0.0f64;
                            for oy in oy_start..oy_end {
                                let iy = (oy as i64 + dy) as usize;
                                let ix0 = (ox_start as i64 + dx) as usize;
                                let g_row = &g_plane[oy * w + ox_start..oy * w + ox_end];
                                let in_row = &in_plane[iy * w + ix0..];
                                let gi_row = &mut gi_plane[iy * w + ix0..];
                                for (i, g) in g_row.iter().enumerate() {
                                    w_acc += g * in_row[i];
                                    gi_row[i] += weight * g;
                                }
                            }
                            grad_weight[widx] += w_acc;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

fn relu_inplace(data: &mut [f64]) {
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activated.iter()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pool; returns pooled values and flat argmax indices into the
/// input plane.
fn maxpool2(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0f64; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = best;
                arg[plane * oh * ow + oy * ow + ox] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

fn maxpool2_backward(grad_out: &[f64], arg: &[u32], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut grad_in = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        for o in 0..oh * ow {
            grad_in[plane * h * w + arg[plane * oh * ow + o] as usize] +=
                grad_out[plane * oh * ow + o];
        }
    }
    grad_in
}

fn upsample_nearest2(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h * 2;
    let ow = w * 2;
    let mut out = vec![0.0f64; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = oy / 2;
            for ox in 0..ow {
                out[plane * oh * ow + oy * ow + ox] = input[plane * h * w + iy * w + ox / 2];
            }
        }
    }
    out
}

fn upsample_nearest2_backward(grad_out: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h * 2;
    let ow = w * 2;
    let mut grad_in = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                grad_in[plane * h * w + (oy / 2) * w + ox / 2] +=
                    grad_out[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    grad_in
}

/// Concatenates per-image channel blocks: [n][c1][hw] ++ [n][c2][hw].
fn concat_channels(a: &[f64], b: &[f64], n: usize, c1: usize, c2: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * (c1 + c2) * hw];
    for img in 0..n {
        out[img * (c1 + c2) * hw..][..c1 * hw].copy_from_slice(&a[img * c1 * hw..][..c1 * hw]);
        out[img * (c1 + c2) * hw + c1 * hw..][..c2 * hw]
            .copy_from_slice(&b[img * c2 * hw..][..c2 * hw]);
    }
    out
}

fn split_channels(grad: &[f64], n: usize, c1: usize, c2: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0f64; n * c1 * hw];
    let mut b = vec![0.0f64; n * c2 * hw];
    for img in 0..n {
        a[img * c1 * hw..][..c1 * hw].copy_from_slice(&grad[img * (c1 + c2) * hw..][..c1 * hw]);
        b[img * c2 * hw..][..c2 * hw]
            .copy_from_slice(&grad[img * (c1 + c2) * hw + c1 * hw..][..c2 * hw]);
    }
    (a, b)
}

const ENC1: usize = 16;
const ENC2: usize = 32;

/// Names of the seven convolution layers, in parameter order.
pub const LAYER_NAMES: [&str; 7] = ["enc1a", "enc1b", "enc2a", "enc2b", "dec1", "dec2", "head"];

/// The segmenter. See the module docs for the layer layout.
#[derive(Debug, Clone)]
pub struct MiniUNet {
    pub classes: usize,
    pub layers: Vec<Conv2d>,
}

/// Activations cached by [`MiniUNet::forward`] for the backward pass.
pub struct ForwardCache {
    n: usize,
    h: usize,
    w: usize,
    input: Vec<f64>,
    enc1a: Vec<f64>,
    enc1b: Vec<f64>,
    pooled: Vec<f64>,
    pool_arg: Vec<u32>,
    enc2a: Vec<f64>,
    enc2b: Vec<f64>,
    concat: Vec<f64>,
    dec1: Vec<f64>,
    dec2: Vec<f64>,
}

/// Per-layer (weight, bias) gradients, parallel to `MiniUNet::layers`.
pub type Gradients = Vec<(Vec<f64>, Vec<f64>)>;

impl MiniUNet {
    /// He-uniform initialization from the seed; biases start at zero.
    pub fn new(classes: usize, seed: u64) -> MiniUNet {
        let mut rng = rng_for_index(seed, u64::MAX);
        let layers = vec![
            Conv2d::he_uniform(3, ENC1, 3, &mut rng),
            Conv2d::he_uniform(ENC1, ENC1, 3, &mut rng),
            Conv2d::he_uniform(ENC1, ENC2, 3, &mut rng),
            Conv2d::he_uniform(ENC2, ENC2, 3, &mut rng),
            Conv2d::he_uniform(ENC1 + ENC2, ENC1, 3, &mut rng),
            Conv2d::he_uniform(ENC1, ENC1, 3, &mut rng),
            Conv2d::he_uniform(ENC1, classes, 1, &mut rng),
        ];
        MiniUNet { classes, layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass; logits come back as [n][classes][h][w].
    pub fn forward(
        &self,
        input: &[f64],
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::OddSpatialDims { height: h, width: w });
        }
        if input.len() != n * 3 * h * w {
            return Err(ModelError::ShapeMismatch {
                expected: n * 3 * h * w,
                got: input.len(),
            });
        }
        let mut enc1a = self.layers[0].forward(input, n, h, w);
        relu_inplace(&mut enc1a);
        let mut enc1b = self.layers[1].forward(&enc1a, n, h, w);
        relu_inplace(&mut enc1b);
        let (pooled, pool_arg) = maxpool2(&enc1b, n, ENC1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let mut enc2a = self.layers[2].forward(&pooled, n, h2, w2);
        relu_inplace(&mut enc2a);
        let mut enc2b = self.layers[3].forward(&enc2a, n, h2, w2);
        relu_inplace(&mut enc2b);
        let upsampled = upsample_nearest2(&enc2b, n, ENC2, h2, w2);
        let concat = concat_channels(&enc1b, &upsampled, n, ENC1, ENC2, h * w);
        let mut dec1 = self.layers[4].forward(&concat, n, h, w);
        relu_inplace(&mut dec1);
        let mut dec2 = self.layers[5].forward(&dec1, n, h, w);
        relu_inplace(&mut dec2);
        let logits = self.layers[6].forward(&dec2, n, h, w);
        Ok((
            logits,
            ForwardCache {
                n,
                h,
                w,
                input: input.to_vec(),
                enc1a,
                enc1b,
                pooled,
                pool_arg,
                enc2a,
                enc2b,
                concat,
                dec1,
                dec2,
            },
        ))
    }

    /// Logits without the cache, for inference.
    pub fn forward_logits(&self, input: &[f64], n: usize, h: usize, w: usize) -> Result<Vec<f64>, ModelError> {
        self.forward(input, n, h, w).map(|(logits, _)| logits)
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect()
    }

    /// Reverse-mode gradients for every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
    ) -> Result<Gradients, ModelError> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        if grad_logits.len() != n * self.classes * h * w {
            return Err(ModelError::ShapeMismatch {
                expected: n * self.classes * h * w,
                got: grad_logits.len(),
            });
        }
        let mut grads = self.zero_gradients();
        let (h2, w2) = (h / 2, w / 2);

        let mut g = {
            let (gw, gb) = &mut grads[6];
            self.layers[6].backward(&cache.dec2, grad_logits, n, h, w, gw, gb)
        };
        relu_backward(&mut g, &cache.dec2);
        let mut g = {
            let (gw, gb) = &mut grads[5];
            self.layers[5].backward(&cache.dec1, &g, n, h, w, gw, gb)
        };
        relu_backward(&mut g, &cache.dec1);
        let g = {
            let (gw, gb) = &mut grads[4];
            self.layers[4].backward(&cache.concat, &g, n, h, w, gw, gb)
        };
        let (mut g_skip, g_up) = split_channels(&g, n, ENC1, ENC2, h * w);
        let mut g = upsample_nearest2_backward(&g_up, n, ENC2, h2, w2);
        relu_backward(&mut g, &cache.enc2b);
        let mut g = {
            let (gw, gb) = &mut grads[3];
            self.layers[3].backward(&cache.enc2a, &g, n, h2, w2, gw, gb)
        };
        relu_backward(&mut g, &cache.enc2a);
        let g = {
            let (gw, gb) = &mut grads[2];
            self.layers[2].backward(&cache.pooled, &g, n, h2, w2, gw, gb)
        };
        let g_pool = maxpool2_backward(&g, &cache.pool_arg, n, ENC1, h, w);
        for (a, b) in g_skip.iter_mut().zip(g_pool.iter()) {
            *a += b;
        }
        relu_backward(&mut g_skip, &cache.enc1b);
        let mut g = {
            let (gw, gb) = &mut grads[1];
            self.layers[1].backward(&cache.enc1a, &g_skip, n, h, w, gw, gb)
        };
        relu_backward(&mut g, &cache.enc1a);
        {
            let (gw, gb) = &mut grads[0];
            self.layers[0].backward(&cache.input, &g, n, h, w, gw, gb);
        }
        Ok(grads)
    }
}

impl TilePredictor for MiniUNet {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_tile(&self, window: &[f64], height: usize, width: usize) -> Vec<f64> {
        let logits = self
            .forward_logits(window, 1, height, width)
            .expect("tile dims must be even");
        // Softmax expects [n][c][p] which matches [1][c][h*w].
        objectives::softmax(&logits, 1, self.classes, height * width)
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    config: &AdamWConfig,
) {
    let bias1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bias2 = 1.0 - libm::pow(config.beta2, t as f64);
    for i in 0..params.len() {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grads[i];
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= config.lr * m_hat / (math::sqrt(v_hat) + config.epsilon)
            + config.lr * config.weight_decay * params[i];
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without a strict
/// improvement over the best validation loss, the rate divides by 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, min_lr: f64) -> PlateauScheduler {
        PlateauScheduler {
            lr: lr0,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the rate for the next
    /// epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.counter = 0;
            }
        }
        self.lr
    }
}

/// Training hyperparameters. `Default` carries the full-scale recipe;
/// [`TrainerConfig::desk_scale`] shrinks patches and epochs for tests.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub lr0: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub loss: LossId,
    pub level: Level,
    pub patch_size: usize,
    pub dice_epsilon: f64,
    pub tree_lambda: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr0: 5e-5,
            lr_factor: 1.0 / 3.0,
            patience: 2,
            weight_decay: 0.02,
            batch_size: 12,
            epochs: 200,
            // As printed in the training recipe; note beta2 < beta1.
            beta1: 0.99,
            beta2: 0.9,
            adam_epsilon: 1e-8,
            min_lr: 1e-7,
            seed: 0,
            loss: LossId::SoftDice,
            level: Level::Explanation,
            patch_size: 512,
            dice_epsilon: objectives::DICE_EPSILON,
            tree_lambda: 0.5,
        }
    }
}

impl TrainerConfig {
    /// Small patches and few epochs, for desk-scale runs and tests.
    pub fn desk_scale(seed: u64, loss: LossId, level: Level) -> TrainerConfig {
        TrainerConfig {
            seed,
            loss,
            level,
            patch_size: 64,
            epochs: 30,
            ..TrainerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_factor", self.lr_factor),
            ("weight_decay", self.weight_decay),
            ("adam_epsilon", self.adam_epsilon),
            ("min_lr", self.min_lr),
            ("dice_epsilon", self.dice_epsilon),
        ];
        for (name, value) in positive {
            if value <= 0.0 {
                return Err(ModelError::BadConfig(alloc::format!("{name} must be positive")));
            }
        }
        if self.patience == 0 {
            return Err(ModelError::BadConfig("patience must be >= 1".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patch_size == 0 {
            return Err(ModelError::BadConfig(
                "batch_size, epochs, patch_size must be positive".to_string(),
            ));
        }
        if self.patch_size % 2 != 0 {
            return Err(ModelError::BadConfig("patch_size must be even".to_string()));
        }
        if !(0.0..=1.0).contains(&self.tree_lambda) {
            return Err(ModelError::BadConfig("tree_lambda must lie in [0,1]".to_string()));
        }
        Ok(())
    }

    /// FNV-1a over the canonical field encoding; recorded in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for v in [
            self.lr0,
            self.lr_factor,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.adam_epsilon,
            self.min_lr,
            self.dice_epsilon,
            self.tree_lambda,
        ] {
            eat(&v.to_le_bytes());
        }
        for v in [
            self.patience as u64,
            self.batch_size as u64,
            self.epochs as u64,
            self.seed,
            self.patch_size as u64,
            self.level.depth() as u64,
        ] {
            eat(&v.to_le_bytes());
        }
        eat(self.loss.as_str().as_bytes());
        hash
    }
}

/// One named f32 tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

/// Serializable training state snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: u64,
    pub epoch: u32,
    pub val_loss: f32,
    pub tensors: Vec<TensorData>,
}

/// AdamW state for the whole model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl OptimizerState {
    fn zeros(model: &MiniUNet) -> OptimizerState {
        OptimizerState {
            m: model.zero_gradients(),
            v: model.zero_gradients(),
            t: 0,
        }
    }
}

fn f32_round(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn f64_widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Builds the checkpoint for (model, optimizer, scheduler) at an epoch.
pub fn make_checkpoint(
    model: &MiniUNet,
    opt: &OptimizerState,
    sched: &PlateauScheduler,
    config: &TrainerConfig,
    epoch: u32,
    val_loss: f64,
) -> Checkpoint {
    let mut tensors = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let name = LAYER_NAMES[i];
        let shape = vec![
            layer.out_channels as u32,
            layer.in_channels as u32,
            layer.kernel as u32,
            layer.kernel as u32,
        ];
        tensors.push(TensorData {
            name: alloc::format!("{name}.weight"),
            shape: shape.clone(),
            data: f32_round(&layer.weight),
        });
        tensors.push(TensorData {
            name: alloc::format!("{name}.bias"),
            shape: vec![layer.out_channels as u32],
            data: f32_round(&layer.bias),
        });
        tensors.push(TensorData {
            name: alloc::format!("{name}.weight.m"),
            shape: shape.clone(),
            data: f32_round(&opt.m[i].0),
        });
        tensors.push(TensorData {
            name: alloc::format!("{name}.bias.m"),
            shape: vec![layer.out_channels as u32],
            data: f32_round(&opt.m[i].1),
        });
        tensors.push(TensorData {
            name: alloc::format!("{name}.weight.v"),
            shape,
            data: f32_round(&opt.v[i].0),
        });
        tensors.push(TensorData {
            name: alloc::format!("{name}.bias.v"),
            shape: vec![layer.out_channels as u32],
            data: f32_round(&opt.v[i].1),
        });
    }
    tensors.push(TensorData {
        name: "opt.t".to_string(),
        shape: vec![2],
        data: vec![(opt.t >> 32) as f32, (opt.t & 0xffff_ffff) as f32],
    });
    tensors.push(TensorData {
        name: "sched.state".to_string(),
        shape: vec![3],
        data: vec![sched.lr as f32, sched.best as f32, sched.counter as f32],
    });
    Checkpoint {
        format_version: 1,
        config_hash: config.hash(),
        epoch,
        val_loss: val_loss as f32,
        tensors,
    }
}

fn tensor<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a TensorData, ModelError> {
    ckpt.tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| ModelError::CheckpointMismatch(alloc::format!("missing tensor {name}")))
}

/// Rebuilds just the network from a checkpoint (for inference); the class
/// count comes from the head tensor's shape.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<MiniUNet, ModelError> {
    let head = tensor(ckpt, "head.weight")?;
    let classes = head.shape.first().copied().unwrap_or(0) as usize;
    if classes == 0 {
        return Err(ModelError::CheckpointMismatch("head tensor has no shape".to_string()));
    }
    let mut model = MiniUNet::new(classes, 0);
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let name = LAYER_NAMES[i];
        let wt = tensor(ckpt, &alloc::format!("{name}.weight"))?;
        if wt.data.len() != layer.weight.len() {
            return Err(ModelError::CheckpointMismatch(alloc::format!(
                "tensor {name}.weight has {} values, expected {}",
                wt.data.len(),
                layer.weight.len()
            )));
        }
        layer.weight = f64_widen(&wt.data);
        let bt = tensor(ckpt, &alloc::format!("{name}.bias"))?;
        if bt.data.len() != layer.bias.len() {
            return Err(ModelError::CheckpointMismatch(alloc::format!(
                "tensor {name}.bias has {} values, expected {}",
                bt.data.len(),
                layer.bias.len()
            )));
        }
        layer.bias = f64_widen(&bt.data);
    }
    Ok(model)
}

/// Restores model, optimizer, and scheduler from a checkpoint.
pub fn restore_checkpoint(
    ckpt: &Checkpoint,
    config: &TrainerConfig,
    classes: usize,
) -> Result<(MiniUNet, OptimizerState, PlateauScheduler), ModelError> {
    let mut model = MiniUNet::new(classes, config.seed);
    let mut opt = OptimizerState::zeros(&model);
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let name = LAYER_NAMES[i];
        let expect = |len: usize, data: &TensorData| -> Result<(), ModelError> {
            if data.data.len() != len {
                return Err(ModelError::CheckpointMismatch(alloc::format!(
                    "tensor {} has {} values, expected {len}",
                    data.name,
                    data.data.len()
                )));
            }
            Ok(())
        };
        let wt = tensor(ckpt, &alloc::format!("{name}.weight"))?;
        expect(layer.weight.len(), wt)?;
        layer.weight = f64_widen(&wt.data);
        let bt = tensor(ckpt, &alloc::format!("{name}.bias"))?;
        expect(layer.bias.len(), bt)?;
        layer.bias = f64_widen(&bt.data);
        opt.m[i].0 = f64_widen(&tensor(ckpt, &alloc::format!("{name}.weight.m"))?.data);
        opt.m[i].1 = f64_widen(&tensor(ckpt, &alloc::format!("{name}.bias.m"))?.data);
        opt.v[i].0 = f64_widen(&tensor(ckpt, &alloc::format!("{name}.weight.v"))?.data);
        opt.v[i].1 = f64_widen(&tensor(ckpt, &alloc::format!("{name}.bias.v"))?.data);
    }
    let t = tensor(ckpt, "opt.t")?;
    opt.t = ((t.data[0] as u64) << 32) | (t.data[1] as u64);
    let s = tensor(ckpt, "sched.state")?;
    let mut sched = PlateauScheduler::new(config.lr0, config.lr_factor, config.patience, config.min_lr);
    sched.lr = s.data[0] as f64;
    sched.best = s.data[1] as f64;
    sched.counter = s.data[2] as usize;
    Ok((model, opt, sched))
}

/// One training image with its fused labels at the training level.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: RasterImage,
    pub labels: SoftLabelMap,
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Training output: the checkpoint that minimized validation loss plus the
/// full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: u32,
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
}

struct BatchTensors {
    input: Vec<f64>,
    soft: Vec<f64>,
    hard: Vec<u32>,
    mask: Vec<bool>,
    n: usize,
}

/// Stacks (image, label) patches into loss-ready tensors.
///
/// The count mask is foreground for soft losses and foreground ∧
/// unambiguous for hard losses.
fn stack_batch(patches: &[(RasterImage, SoftLabelMap)], hard: bool) -> BatchTensors {
    let n = patches.len();
    let (h, w) = (patches[0].0.height, patches[0].0.width);
    let classes = patches[0].1.classes;
    let hw = h * w;
    let mut input = vec![0.0f64; n * 3 * hw];
    let mut soft = vec![0.0f64; n * classes * hw];
    let mut hard_labels = vec![0u32; n * hw];
    let mut mask = vec![false; n * hw];
    for (img, (image, labels)) in patches.iter().enumerate() {
        for ch in 0..3 {
            for j in 0..hw {
                input[(img * 3 + ch) * hw + j] = image.pixels[j * 3 + ch];
            }
        }
        for ch in 0..classes {
            for j in 0..hw {
                soft[(img * classes + ch) * hw + j] = labels.probs[j * classes + ch];
            }
        }
        if hard {
            let majority = majority_vote(labels);
            for j in 0..hw {
                mask[img * hw + j] = majority.valid[j];
                hard_labels[img * hw + j] = majority.labels[j];
            }
        } else {
            for j in 0..hw {
                mask[img * hw + j] = labels.foreground[j];
            }
        }
    }
    BatchTensors {
        input,
        soft,
        hard: hard_labels,
        mask,
        n,
    }
}

fn eval_loss(
    config: &TrainerConfig,
    ontology: &Ontology,
    logits: &[f64],
    batch: &BatchTensors,
    classes: usize,
    hw: usize,
) -> Result<LossValueGrad, objectives::ObjectiveError> {
    let (n, c, p) = (batch.n, classes, hw);
    match config.loss {
        LossId::SoftDice => objectives::soft_dice_loss(
            logits,
            &batch.soft,
            &batch.mask,
            n,
            c,
            p,
            config.dice_epsilon,
        ),
        LossId::TreeSoftDice => objectives::tree_loss(
            TreeBase::SoftDice,
            config.tree_lambda,
            logits,
            &batch.soft,
            &batch.mask,
            n,
            c,
            p,
            ontology,
            config.level,
            config.dice_epsilon,
        ),
        LossId::TreeCrossEntropy => objectives::tree_loss(
            TreeBase::CrossEntropy,
            config.tree_lambda,
            logits,
            &batch.soft,
            &batch.mask,
            n,
            c,
            p,
            ontology,
            config.level,
            config.dice_epsilon,
        ),
        LossId::CrossEntropySoft => {
            objectives::cross_entropy_soft(logits, &batch.soft, &batch.mask, n, c, p)
        }
        LossId::CrossEntropyHard => {
            objectives::cross_entropy_hard(logits, &batch.hard, &batch.mask, n, c, p)
        }
        LossId::DiceHard => objectives::dice_loss_hard(
            logits,
            &batch.hard,
            &batch.mask,
            n,
            c,
            p,
            config.dice_epsilon,
        ),
    }
}

/// Rounds live training state through f32, matching what a checkpoint
/// stores; keeps save/resume bit-identical with uninterrupted runs.
fn quantize_scheduler(sched: &mut PlateauScheduler) {
    sched.lr = sched.lr as f32 as f64;
    sched.best = sched.best as f32 as f64;
}

fn quantize_state(model: &mut MiniUNet, opt: &mut OptimizerState) {
    for layer in model.layers.iter_mut() {
        for v in layer.weight.iter_mut() {
            *v = *v as f32 as f64;
        }
        for v in layer.bias.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    for grads in [&mut opt.m, &mut opt.v] {
        for (w, b) in grads.iter_mut() {
            for v in w.iter_mut() {
                *v = *v as f32 as f64;
            }
            for v in b.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Trains from scratch. See [`train_with_start`].
pub fn train(
    config: &TrainerConfig,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    ontology: &Ontology,
    on_epoch: impl FnMut(&Checkpoint, &EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    train_with_start(config, train_set, val_set, ontology, None, on_epoch)
}

/// Runs the training loop: shuffled batches of augmented random patches,
/// masked loss, AdamW, validation on central patches, plateau scheduling,
/// and a checkpoint per epoch. Returns the epoch with the lowest
/// validation loss (ties keep the earliest).
///
/// Each epoch draws from its own RNG stream derived from (seed, epoch), so
/// resuming from a checkpoint at epoch e reproduces epochs e+1.. exactly.
pub fn train_with_start(
    config: &TrainerConfig,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    ontology: &Ontology,
    start: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint, &EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit { split: "train" });
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptySplit { split: "val" });
    }
    let classes = ontology.class_count(config.level);
    let hard = !config.loss.uses_soft_targets();

    let (mut model, mut opt, mut sched, start_epoch) = match start {
        Some(ckpt) => {
            if ckpt.config_hash != config.hash() {
                return Err(ModelError::CheckpointMismatch(
                    "config hash differs from checkpoint".to_string(),
                ));
            }
            let (model, opt, sched) = restore_checkpoint(ckpt, config, classes)?;
            (model, opt, sched, ckpt.epoch)
        }
        None => {
            let model = MiniUNet::new(classes, config.seed);
            let opt = OptimizerState::zeros(&model);
            let sched = PlateauScheduler::new(config.lr0, config.lr_factor, config.patience, config.min_lr);
            (model, opt, sched, 0)
        }
    };

    // Central validation patches are fixed across epochs.
    let patch = config.patch_size;
    let val_patches: Vec<(RasterImage, SoftLabelMap)> = val_set
        .iter()
        .map(|ex| {
            let (row0, col0) = imaging::central_offsets(ex.image.height, ex.image.width, patch);
            let size_h = patch.min(ex.image.height);
            let size_w = patch.min(ex.image.width);
            (
                ex.image.crop(row0, col0, size_h, size_w),
                ex.labels.crop(row0, col0, size_h, size_w),
            )
        })
        .collect();

    let mut log: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(u32, f64, Checkpoint)> = None;

    for epoch in (start_epoch + 1)..=(config.epochs as u32) {
        let mut rng = rng_for_index(config.seed, epoch as u64);
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut train_loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let patches: Vec<(RasterImage, SoftLabelMap)> = chunk
                .iter()
                .map(|&idx| {
                    let ex = &train_set[idx];
                    let (img, lab) = imaging::sample_patch(&ex.image, &ex.labels, patch, &mut rng);
                    imaging::augment_light(&img, &lab, &mut rng)
                })
                .collect();
            let batch = stack_batch(&patches, hard);
            let hw = patch * patch;
            // Batches whose masks are empty (all background or ambiguous)
            // carry no signal and are skipped.
            if !batch.mask.iter().any(|&m| m) {
                continue;
            }
            let (logits, cache) = model.forward(&batch.input, batch.n, patch, patch)?;
            let loss = eval_loss(config, ontology, &logits, &batch, classes, hw)?;
            if !loss.value.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch: epoch as usize,
                    step: steps,
                });
            }
            train_loss_sum += loss.value;
            steps += 1;
            let grads = model.backward(&cache, &loss.grad_logits)?;
            opt.t += 1;
            let adamw = AdamWConfig {
                lr,
                beta1: config.beta1,
                beta2: config.beta2,
                epsilon: config.adam_epsilon,
                weight_decay: config.weight_decay,
            };
            for (idx, (layer, (gw, gb))) in
                model.layers.iter_mut().zip(grads.iter()).enumerate()
            {
                adamw_step(&mut layer.weight, gw, &mut opt.m[idx].0, &mut opt.v[idx].0, opt.t, &adamw);
                adamw_step(&mut layer.bias, gb, &mut opt.m[idx].1, &mut opt.v[idx].1, opt.t, &adamw);
            }
        }
        let train_loss = if steps > 0 { train_loss_sum / steps as f64 } else { 0.0 };

        // Validation: central patches, no augmentation, batch-size groups
        // averaged by group count.
        let mut val_sum = 0.0;
        let mut val_groups = 0usize;
        for group in val_patches.chunks(config.batch_size) {
            let batch = stack_batch(group, hard);
            if !batch.mask.iter().any(|&m| m) {
                continue;
            }
            let (vh, vw) = (group[0].0.height, group[0].0.width);
            let logits = model.forward_logits(&batch.input, batch.n, vh, vw)?;
            let loss = eval_loss(config, ontology, &logits, &batch, classes, vh * vw)?;
            if !loss.value.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch: epoch as usize,
                    step: usize::MAX,
                });
            }
            val_sum += loss.value;
            val_groups += 1;
        }
        let val_loss = if val_groups > 0 { val_sum / val_groups as f64 } else { f64::INFINITY };

        sched.step(val_loss);
        quantize_scheduler(&mut sched);
        quantize_state(&mut model, &mut opt);
        let ckpt = make_checkpoint(&model, &opt, &sched, config, epoch, val_loss);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&ckpt, &record);
        log.push(record);
        let improved = best
            .as_ref()
            .map(|(_, best_val, _)| val_loss < *best_val)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, val_loss, ckpt));
        }
    }

    let (best_epoch, _, best_ckpt) = best.ok_or(ModelError::EmptySplit { split: "train" })?;
    Ok(TrainOutcome {
        best_epoch,
        best: best_ckpt,
        log,
    })
}
