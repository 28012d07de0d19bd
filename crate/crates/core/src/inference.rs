//! Whole-image prediction via Gaussian-weighted sliding windows, remapped
//! prediction maps, and overlay rendering.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fusion::SoftLabelMap;
use crate::imaging::RasterImage;
use crate::math;
use crate::ontology::{Level, Ontology};

/// Model output distribution over an image.
#[derive(Debug, Clone)]
pub struct PredictiveMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub level: Level,
    /// Row-major [row][col][class]; rows sum to 1 on every pixel.
    pub probs: Vec<f64>,
    /// Presentation mask; `None` means all pixels shown.
    pub foreground: Option<Vec<bool>>,
}

impl PredictiveMap {
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.classes..(idx + 1) * self.classes]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Argmax class per pixel; ties break toward the lower id.
    pub fn argmax(&self) -> Vec<u32> {
        (0..self.pixels())
            .map(|idx| {
                let row = self.pixel(idx);
                let mut best = 0usize;
                for ch in 1..self.classes {
                    if row[ch] > row[best] {
                        best = ch;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Predicts class probabilities for one image window.
///
/// The window arrives channel-major (3×h×w); the result must be class-major
/// (C×h×w) with per-pixel distributions.
pub trait TilePredictor {
    fn classes(&self) -> usize;
    fn predict_tile(&self, window: &[f64], height: usize, width: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct SlidingWindowConfig {
    pub window: usize,
    pub overlap: f64,
    /// Gaussian σ as a fraction of the window side.
    pub sigma_frac: f64,
    /// Minimum blend weight, so edge pixels never drop out.
    pub weight_floor: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            window: 512,
            overlap: 0.5,
            sigma_frac: 0.125,
            weight_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceError {
    OddWindow(usize),
    BadOverlap(f64),
    ColorTableMismatch { classes: usize, level_classes: usize },
    SizeMismatch,
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceError::OddWindow(w) => write!(f, "window size {w} must be even"),
            InferenceError::BadOverlap(o) => write!(f, "overlap {o} must lie in [0, 1)"),
            InferenceError::ColorTableMismatch { classes, level_classes } => write!(
                f,
                "map has {classes} classes but the ontology level has {level_classes}"
            ),
            InferenceError::SizeMismatch => f.write_str("image and map sizes disagree"),
        }
    }
}

impl core::error::Error for InferenceError {}

/// Tile origins along one axis: stride-spaced, last tile clamped to the
/// edge so every pixel is covered.
fn tile_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut start = 0usize;
    loop {
        if start + window >= extent {
            origins.push(extent - window);
            break;
        }
        origins.push(start);
        start += stride;
    }
    origins.dedup();
    origins
}

fn reflect_index(i: i64, len: usize) -> usize {
    let len = len as i64;
    let period = 2 * len;
    let mut i = i.rem_euclid(period);
    if i >= len {
        i = period - 1 - i;
    }
    i as usize
}

/// Runs the model over a Gaussian-blended tile grid.
///
/// Tiles of `window`² pixels are spaced by `window·(1−overlap)` with the
/// last tile clamped to the image edge. Per-tile probabilities accumulate
/// with the separable weight `exp(−((x−c)² + (y−c)²)/(2σ²))`, floored at
/// `weight_floor`; the blended rows stay normalized because they are
/// convex combinations. Images smaller than the window are reflect-padded
/// and cropped back.
pub fn sliding_window_predict(
    model: &impl TilePredictor,
    image: &RasterImage,
    level: Level,
    config: &SlidingWindowConfig,
) -> Result<PredictiveMap, InferenceError> {
    let window = config.window;
    if window == 0 || window % 2 != 0 {
        return Err(InferenceError::OddWindow(window));
    }
    if !(0.0..1.0).contains(&config.overlap) {
        return Err(InferenceError::BadOverlap(config.overlap));
    }

    // Reflect-pad small images, predict, crop back.
    if image.height < window || image.width < window {
        let out_h = image.height.max(window);
        let out_w = image.width.max(window);
        let mut padded = RasterImage::new_filled(out_h, out_w, image.pixel_spacing, 0.0);
        for row in 0..out_h {
            let src_r = reflect_index(row as i64, image.height);
            for col in 0..out_w {
                let src_c = reflect_index(col as i64, image.width);
                padded.set_pixel(row, col, image.pixel(src_r, src_c));
            }
        }
        let full = sliding_window_predict(model, &padded, level, config)?;
        let classes = full.classes;
        let mut probs = Vec::with_capacity(image.height * image.width * classes);
        for row in 0..image.height {
            let start = row * out_w * classes;
            probs.extend_from_slice(&full.probs[start..start + image.width * classes]);
        }
        return Ok(PredictiveMap {
            height: image.height,
            width: image.width,
            classes,
            level,
            probs,
            foreground: None,
        });
    }

    let classes = model.classes();
    let stride = ((window as f64 * (1.0 - config.overlap)) as usize).max(1);
    let rows = tile_origins(image.height, window, stride);
    let cols = tile_origins(image.width, window, stride);

    // Separable Gaussian, floored after the product.
    let sigma = config.sigma_frac * window as f64;
    let center = (window as f64 - 1.0) / 2.0;
    let axis: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - center;
            math::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();

    let mut accum = vec![0.0f64; image.height * image.width * classes];
    let mut weight_sum = vec![0.0f64; image.height * image.width];
    let mut tile = vec![0.0f64; 3 * window * window];
    for &row0 in &rows {
        for &col0 in &cols {
            // Extract the CHW tile.
            for ch in 0..3 {
                for r in 0..window {
                    for c in 0..window {
                        tile[(ch * window + r) * window + c] =
                            image.pixels[((row0 + r) * image.width + (col0 + c)) * 3 + ch];
                    }
                }
            }
            let probs = model.predict_tile(&tile, window, window);
            debug_assert_eq!(probs.len(), classes * window * window);
            for r in 0..window {
                for c in 0..window {
                    let w = (axis[r] * axis[c]).max(config.weight_floor);
                    let out_idx = (row0 + r) * image.width + (col0 + c);
                    weight_sum[out_idx] += w;
                    for ch in 0..classes {
                        accum[out_idx * classes + ch] += w * probs[(ch * window + r) * window + c];
                    }
                }
            }
        }
    }

    for idx in 0..image.height * image.width {
        let w = weight_sum[idx];
        for ch in 0..classes {
            accum[idx * classes + ch] /= w;
        }
    }

    Ok(PredictiveMap {
        height: image.height,
        width: image.width,
        classes,
        level,
        probs: accum,
        foreground: None,
    })
}

/// Sums predicted probabilities up the ontology.
pub fn predict_remapped(
    pred: &PredictiveMap,
    ontology: &Ontology,
    target: Level,
) -> Result<PredictiveMap, crate::ontology::OntologyError> {
    let probs = ontology.remap_up(&pred.probs, pred.level, target)?;
    Ok(PredictiveMap {
        height: pred.height,
        width: pred.width,
        classes: ontology.class_count(target),
        level: target,
        probs,
        foreground: pred.foreground.clone(),
    })
}

/// A class map that can be rendered: prediction or soft labels.
#[derive(Clone, Copy)]
pub enum ClassMapRef<'a> {
    Predictive(&'a PredictiveMap),
    Soft(&'a SoftLabelMap),
}

impl ClassMapRef<'_> {
    fn dims(&self) -> (usize, usize, usize, Level) {
        match self {
            ClassMapRef::Predictive(p) => (p.height, p.width, p.classes, p.level),
            ClassMapRef::Soft(s) => (s.height, s.width, s.classes, s.level),
        }
    }

    fn probs(&self) -> &[f64] {
        match self {
            ClassMapRef::Predictive(p) => &p.probs,
            ClassMapRef::Soft(s) => &s.probs,
        }
    }

    fn shown(&self, idx: usize) -> bool {
        match self {
            ClassMapRef::Predictive(p) => p.foreground.as_ref().map(|f| f[idx]).unwrap_or(true),
            ClassMapRef::Soft(s) => s.foreground[idx],
        }
    }
}

/// Alpha-blends the per-pixel argmax class color over the image.
///
/// Background pixels pass through untouched and benign renders transparent.
pub fn render_overlay(
    image: &RasterImage,
    map: ClassMapRef<'_>,
    ontology: &Ontology,
    alpha: f64,
) -> Result<RasterImage, InferenceError> {
    let (height, width, classes, level) = map.dims();
    if height != image.height || width != image.width {
        return Err(InferenceError::SizeMismatch);
    }
    let level_classes = ontology.class_count(level);
    if classes != level_classes {
        return Err(InferenceError::ColorTableMismatch {
            classes,
            level_classes,
        });
    }
    let colors: Vec<[f64; 3]> = (0..classes as u32)
        .map(|id| {
            let c = ontology.node(level, id).map(|n| n.color).unwrap_or([0, 0, 0]);
            [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
        })
        .collect();

    let probs = map.probs();
    let mut out = image.clone();
    for idx in 0..height * width {
        if !map.shown(idx) {
            continue;
        }
        let row = &probs[idx * classes..(idx + 1) * classes];
        let mut best = 0usize;
        for ch in 1..classes {
            if row[ch] > row[best] {
                best = ch;
            }
        }
        if best == 0 {
            continue;
        }
        let base = idx * 3;
        for ch in 0..3 {
            out.pixels[base + ch] =
                (1.0 - alpha) * image.pixels[base + ch] + alpha * colors[best][ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Model that always outputs a fixed distribution.
    struct ConstantModel(Vec<f64>);

    impl TilePredictor for ConstantModel {
        fn classes(&self) -> usize {
            self.0.len()
        }
        fn predict_tile(&self, _window: &[f64], height: usize, width: usize) -> Vec<f64> {
            let c = self.0.len();
            let mut out = vec![0.0; c * height * width];
            for ch in 0..c {
                out[ch * height * width..(ch + 1) * height * width].fill(self.0[ch]);
            }
            out
        }
    }

    fn ramp_image(height: usize, width: usize) -> RasterImage {
        let mut image = RasterImage::new_filled(height, width, 1.0, 0.0);
        for (i, v) in image.pixels.iter_mut().enumerate() {
            *v = (i % 251) as f64 / 251.0;
        }
        image
    }

    #[test]
    fn constant_model_blends_to_constant() {
        let model = ConstantModel(alloc::vec![0.5, 0.3, 0.2]);
        let image = ramp_image(20, 28);
        let config = SlidingWindowConfig {
            window: 8,
            ..SlidingWindowConfig::default()
        };
        let pred = sliding_window_predict(&model, &image, Level::Explanation, &config).unwrap();
        for idx in 0..pred.pixels() {
            let row = pred.pixel(idx);
            assert!((row[0] - 0.5).abs() < 1e-6);
            assert!((row[1] - 0.3).abs() < 1e-6);
            assert!((row[2] - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_stay_normalized() {
        struct VaryingModel;
        impl TilePredictor for VaryingModel {
            fn classes(&self) -> usize {
                3
            }
            fn predict_tile(&self, window: &[f64], height: usize, width: usize) -> Vec<f64> {
                // Distribution driven by the first channel of the input.
                let mut out = vec![0.0; 3 * height * width];
                for j in 0..height * width {
                    let v = window[j].clamp(0.0, 1.0);
                    out[j] = v * 0.8;
                    out[height * width + j] = (1.0 - v) * 0.8;
                    out[2 * height * width + j] = 0.2;
                }
                out
            }
        }
        let image = ramp_image(24, 24);
        let config = SlidingWindowConfig {
            window: 8,
            ..SlidingWindowConfig::default()
        };
        let pred = sliding_window_predict(&VaryingModel, &image, Level::Pattern, &config).unwrap();
        for idx in 0..pred.pixels() {
            let sum: f64 = pred.pixel(idx).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        }
    }

    #[test]
    fn small_image_is_padded_and_cropped_back() {
        let model = ConstantModel(alloc::vec![0.25, 0.75]);
        let image = ramp_image(5, 7);
        let config = SlidingWindowConfig {
            window: 8,
            ..SlidingWindowConfig::default()
        };
        let pred = sliding_window_predict(&model, &image, Level::Pattern, &config).unwrap();
        assert_eq!(pred.height, 5);
        assert_eq!(pred.width, 7);
        assert!((pred.pixel(0)[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn odd_window_is_rejected() {
        let model = ConstantModel(alloc::vec![1.0]);
        let image = ramp_image(8, 8);
        let config = SlidingWindowConfig {
            window: 7,
            ..SlidingWindowConfig::default()
        };
        assert_eq!(
            sliding_window_predict(&model, &image, Level::Pattern, &config).unwrap_err(),
            InferenceError::OddWindow(7)
        );
    }

    #[test]
    fn tile_origins_cover_and_clamp() {
        assert_eq!(tile_origins(16, 8, 4), alloc::vec![0, 4, 8]);
        assert_eq!(tile_origins(8, 8, 4), alloc::vec![0]);
        assert_eq!(tile_origins(10, 8, 4), alloc::vec![0, 2]);
    }
}
