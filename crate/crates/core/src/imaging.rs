//! Foreground masking, physical-resolution resampling, patch sampling, and
//! light augmentation.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::fusion::SoftLabelMap;
use crate::math;

/// RGB image with values in [0,1] and an isotropic physical pixel spacing
/// in µm/px.
#[derive(Debug, Clone)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    /// µm per pixel.
    pub pixel_spacing: f64,
    /// Row-major [row][col][rgb].
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new_filled(height: usize, width: usize, spacing: f64, value: f64) -> RasterImage {
        RasterImage {
            height,
            width,
            pixel_spacing: spacing,
            pixels: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let base = (row * self.width + col) * 3;
        [self.pixels[base], self.pixels[base + 1], self.pixels[base + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let base = (row * self.width + col) * 3;
        self.pixels[base] = rgb[0];
        self.pixels[base + 1] = rgb[1];
        self.pixels[base + 2] = rgb[2];
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> RasterImage {
        assert!(row0 + height <= self.height && col0 + width <= self.width);
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            let start = ((row0 + r) * self.width + col0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        RasterImage {
            height,
            width,
            pixel_spacing: self.pixel_spacing,
            pixels,
        }
    }

    /// Rec. 709 luma.
    #[inline]
    pub fn luminance(&self, idx: usize) -> f64 {
        let base = idx * 3;
        0.2126 * self.pixels[base] + 0.7152 * self.pixels[base + 1] + 0.0722 * self.pixels[base + 2]
    }
}

/// Tissue mask derived from Otsu thresholding plus morphological cleanup.
#[derive(Debug, Clone)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Otsu bin the mask was cut at.
    pub threshold: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImagingError {
    EmptyHistogram,
    NonPositiveSpacing,
    PatchLargerThanImage { size: usize, height: usize, width: usize },
}

impl fmt::Display for ImagingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImagingError::EmptyHistogram => f.write_str("histogram has no samples"),
            ImagingError::NonPositiveSpacing => f.write_str("target spacing must be positive"),
            ImagingError::PatchLargerThanImage { size, height, width } => {
                write!(f, "patch size {size} exceeds image {height}x{width}")
            }
        }
    }
}

impl core::error::Error for ImagingError {}

/// Otsu's threshold over a 256-bin histogram.
///
/// Maximizes between-class variance over splits `class0 <= t < class1`,
/// considering only splits where both classes are populated; the smallest
/// maximizer wins. A single-bin histogram returns that bin.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, ImagingError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(ImagingError::EmptyHistogram);
    }
    let grand_sum: f64 = histogram
        .iter()
        .enumerate()
        .map(|(bin, &count)| bin as f64 * count as f64)
        .sum();

    let mut best_t: Option<u8> = None;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..256usize {
        w0 += histogram[t] as f64;
        sum0 += t as f64 * histogram[t] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (grand_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = Some(t as u8);
        }
    }
    match best_t {
        Some(t) => Ok(t),
        // All mass in one bin: no valid split, return that bin.
        None => Ok(histogram.iter().position(|&c| c > 0).unwrap() as u8),
    }
}

/// Disk offsets (drow, dcol) with drow² + dcol² <= radius².
fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offsets = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                offsets.push((dr, dc));
            }
        }
    }
    offsets
}

/// Binary dilation with a disk: every true pixel stamps its neighborhood.
pub fn dilate_disk(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = disk_offsets(radius);
    let mut out = vec![false; height * width];
    for row in 0..height {
        for col in 0..width {
            if !mask[row * width + col] {
                continue;
            }
            for &(dr, dc) in &offsets {
                let r = row as i64 + dr;
                let c = col as i64 + dc;
                if r >= 0 && r < height as i64 && c >= 0 && c < width as i64 {
                    out[r as usize * width + c as usize] = true;
                }
            }
        }
    }
    out
}

/// Binary erosion as the complement of dilating the complement, so pixels
/// beyond the border never erode the mask.
pub fn erode_disk(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let inverted: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let mut dilated = dilate_disk(&inverted, height, width, radius);
    for v in dilated.iter_mut() {
        *v = !*v;
    }
    dilated
}

/// Closing (dilate, erode) then opening (erode, dilate).
pub fn morphological_cleanup(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let closed = erode_disk(&dilate_disk(mask, height, width, radius), height, width, radius);
    dilate_disk(&erode_disk(&closed, height, width, radius), height, width, radius)
}

/// Tissue mask: Otsu on quantized luminance, tissue on the dark side, then
/// closing and opening with a disk of the given radius.
pub fn foreground_mask(image: &RasterImage, radius: usize) -> Result<ForegroundMask, ImagingError> {
    foreground_mask_with_polarity(image, radius, true)
}

/// As [`foreground_mask`]; `tissue_darker = false` selects the bright side
/// for inverted sources.
pub fn foreground_mask_with_polarity(
    image: &RasterImage,
    radius: usize,
    tissue_darker: bool,
) -> Result<ForegroundMask, ImagingError> {
    let pixels = image.height * image.width;
    let mut histogram = [0u64; 256];
    let mut bins = Vec::with_capacity(pixels);
    for idx in 0..pixels {
        let bin = (math::round(image.luminance(idx).clamp(0.0, 1.0) * 255.0)) as usize;
        let bin = bin.min(255);
        histogram[bin] += 1;
        bins.push(bin as u8);
    }
    let threshold = otsu_threshold(&histogram)?;
    let populated = histogram.iter().filter(|&&c| c > 0).count();
    let raw: Vec<bool> = if populated < 2 {
        // No contrast to separate tissue from background.
        vec![false; pixels]
    } else if tissue_darker {
        bins.iter().map(|&b| b <= threshold).collect()
    } else {
        bins.iter().map(|&b| b > threshold).collect()
    };
    let mask = morphological_cleanup(&raw, image.height, image.width, radius);
    Ok(ForegroundMask {
        height: image.height,
        width: image.width,
        mask,
        threshold,
    })
}

/// Catmull-Rom cubic kernel (a = -0.5); support (-2, 2), partition of unity.
pub fn catmull_rom_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((1.5 * t - 2.5) * t) * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn resample_axis_weights(out_len: usize, in_len: usize, scale_out_over_in: f64) -> Vec<([usize; 4], [f64; 4])> {
    let mut rows = Vec::with_capacity(out_len);
    for i in 0..out_len {
        // Physical center alignment: output center i+0.5 lands at input
        // coordinate (i+0.5)*s_out/s_in - 0.5.
        let x = (i as f64 + 0.5) * scale_out_over_in - 0.5;
        let base = math::floor(x) as i64;
        let mut idx = [0usize; 4];
        let mut w = [0.0f64; 4];
        for (k, (slot_i, slot_w)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
            let j = base - 1 + k as i64;
            *slot_i = j.clamp(0, in_len as i64 - 1) as usize;
            *slot_w = catmull_rom_kernel(x - j as f64);
        }
        rows.push((idx, w));
    }
    rows
}

/// Separable bicubic resampling to a target physical spacing.
///
/// Output size is round(len · s_in/s_out) per axis; borders clamp; values
/// clamp to [0,1] at the end. Equal spacings return a copy.
pub fn resample_bicubic(image: &RasterImage, target_spacing: f64) -> Result<RasterImage, ImagingError> {
    if target_spacing <= 0.0 {
        return Err(ImagingError::NonPositiveSpacing);
    }
    if target_spacing == image.pixel_spacing {
        return Ok(image.clone());
    }
    let scale = image.pixel_spacing / target_spacing;
    let out_h = (math::round(image.height as f64 * scale) as usize).max(1);
    let out_w = (math::round(image.width as f64 * scale) as usize).max(1);
    let ratio = target_spacing / image.pixel_spacing;

    // Horizontal pass.
    let wx = resample_axis_weights(out_w, image.width, ratio);
    let mut horizontal = vec![0.0f64; image.height * out_w * 3];
    for row in 0..image.height {
        let src_row = &image.pixels[row * image.width * 3..(row + 1) * image.width * 3];
        let dst_row = &mut horizontal[row * out_w * 3..(row + 1) * out_w * 3];
        for (o, (idx, w)) in wx.iter().enumerate() {
            for ch in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * src_row[idx[k] * 3 + ch];
                }
                dst_row[o * 3 + ch] = acc;
            }
        }
    }

    // Vertical pass.
    let wy = resample_axis_weights(out_h, image.height, ratio);
    let mut pixels = vec![0.0f64; out_h * out_w * 3];
    for (o, (idx, w)) in wy.iter().enumerate() {
        for col in 0..out_w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * horizontal[(idx[k] * out_w + col) * 3 + ch];
                }
                pixels[(o * out_w + col) * 3 + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }

    Ok(RasterImage {
        height: out_h,
        width: out_w,
        pixel_spacing: target_spacing,
        pixels,
    })
}

/// Reflect index into [0, len) without repeating the border sample.
fn reflect_index(i: i64, len: usize) -> usize {
    let len = len as i64;
    let period = 2 * len;
    let mut i = i.rem_euclid(period);
    if i >= len {
        i = period - 1 - i;
    }
    i as usize
}

/// Reflect-pads an image/label pair up to at least `size` per axis.
fn reflect_pad_pair(image: &RasterImage, labels: &SoftLabelMap, size: usize) -> (RasterImage, SoftLabelMap) {
    let out_h = image.height.max(size);
    let out_w = image.width.max(size);
    let mut padded_img = RasterImage::new_filled(out_h, out_w, image.pixel_spacing, 0.0);
    let classes = labels.classes;
    let mut probs = vec![0.0; out_h * out_w * classes];
    let mut foreground = vec![false; out_h * out_w];
    let mut ambiguous = vec![false; out_h * out_w];
    for row in 0..out_h {
        let src_r = reflect_index(row as i64, image.height);
        for col in 0..out_w {
            let src_c = reflect_index(col as i64, image.width);
            padded_img.set_pixel(row, col, image.pixel(src_r, src_c));
            let src_idx = src_r * image.width + src_c;
            let dst_idx = row * out_w + col;
            probs[dst_idx * classes..(dst_idx + 1) * classes]
                .copy_from_slice(labels.pixel(src_idx));
            foreground[dst_idx] = labels.foreground[src_idx];
            ambiguous[dst_idx] = labels.ambiguous[src_idx];
        }
    }
    (
        padded_img,
        SoftLabelMap {
            height: out_h,
            width: out_w,
            classes,
            level: labels.level,
            annotator_count: labels.annotator_count,
            vote_denominator: labels.vote_denominator,
            probs,
            foreground,
            ambiguous,
        },
    )
}

/// Draws a random patch that contains at least one foreground pixel.
///
/// Uniformly samples top-left corners, rejecting all-background patches up
/// to 100 times; after that the attempt with the most foreground wins.
/// Images smaller than the patch are reflect-padded first.
pub fn sample_patch(
    image: &RasterImage,
    labels: &SoftLabelMap,
    size: usize,
    rng: &mut impl Rng,
) -> (RasterImage, SoftLabelMap) {
    let (image, labels) = if image.height < size || image.width < size {
        let (i, l) = reflect_pad_pair(image, labels, size);
        (alloc::borrow::Cow::Owned(i), alloc::borrow::Cow::Owned(l))
    } else {
        (
            alloc::borrow::Cow::Borrowed(image),
            alloc::borrow::Cow::Borrowed(labels),
        )
    };
    let max_row = image.height - size;
    let max_col = image.width - size;

    let foreground_count = |row0: usize, col0: usize| -> usize {
        let mut count = 0;
        for r in row0..row0 + size {
            count += labels.foreground[r * image.width + col0..r * image.width + col0 + size]
                .iter()
                .filter(|&&f| f)
                .count();
        }
        count
    };

    let mut best: Option<(usize, usize, usize)> = None;
    for _ in 0..100 {
        let row0 = if max_row == 0 { 0 } else { rng.random_range(0..=max_row) };
        let col0 = if max_col == 0 { 0 } else { rng.random_range(0..=max_col) };
        let count = foreground_count(row0, col0);
        if count > 0 {
            return (image.crop(row0, col0, size, size), labels.crop(row0, col0, size, size));
        }
        if best.map(|(_, _, c)| count > c).unwrap_or(true) {
            best = Some((row0, col0, count));
        }
    }
    let (row0, col0, _) = best.unwrap();
    (image.crop(row0, col0, size, size), labels.crop(row0, col0, size, size))
}

/// Top-left corner of the centered `size`² window.
pub fn central_offsets(height: usize, width: usize, size: usize) -> (usize, usize) {
    ((height.saturating_sub(size)) / 2, (width.saturating_sub(size)) / 2)
}

/// Central `size`² patch of the image.
pub fn central_patch(image: &RasterImage, size: usize) -> Result<RasterImage, ImagingError> {
    if image.height < size || image.width < size {
        return Err(ImagingError::PatchLargerThanImage {
            size,
            height: image.height,
            width: image.width,
        });
    }
    let (row0, col0) = central_offsets(image.height, image.width, size);
    Ok(image.crop(row0, col0, size, size))
}

/// Geometric draw of [`augment_light`], applied identically to image and
/// labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub channel_scale: [f64; 3],
    pub channel_offset: [f64; 3],
}

impl AugmentDraw {
    /// Draw order is fixed: hflip, vflip, rotation, then per-channel scale
    /// and offset pairs.
    pub fn sample(rng: &mut impl Rng) -> AugmentDraw {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = rng.random_range(0..4u8);
        let mut channel_scale = [0.0; 3];
        let mut channel_offset = [0.0; 3];
        for ch in 0..3 {
            channel_scale[ch] = rng.random_range(0.9..1.1);
            channel_offset[ch] = rng.random_range(-0.05..0.05);
        }
        AugmentDraw {
            hflip,
            vflip,
            quarter_turns,
            channel_scale,
            channel_offset,
        }
    }

    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        vflip: false,
        quarter_turns: 0,
        channel_scale: [1.0; 3],
        channel_offset: [0.0; 3],
    };
}

#[derive(Clone, Copy)]
enum GeomOp {
    HFlip,
    VFlip,
    Rot90,
}

fn apply_geom<T: Copy>(data: &[T], height: usize, width: usize, stride: usize, op: GeomOp) -> (Vec<T>, usize, usize) {
    let (out_h, out_w) = match op {
        GeomOp::Rot90 => (width, height),
        _ => (height, width),
    };
    let mut out = Vec::with_capacity(data.len());
    for row in 0..out_h {
        for col in 0..out_w {
            let (src_r, src_c) = match op {
                GeomOp::HFlip => (row, width - 1 - col),
                GeomOp::VFlip => (height - 1 - row, col),
                // 90° counter-clockwise: output (r, c) takes input
                // (c, W_in - 1 - r); the output is W×H for an H×W input.
                GeomOp::Rot90 => (col, width - 1 - row),
            };
            let base = (src_r * width + src_c) * stride;
            out.extend_from_slice(&data[base..base + stride]);
        }
    }
    (out, out_h, out_w)
}

/// Applies 50% flips, a random quarter rotation, and per-channel affine
/// jitter (image only). The geometric map is shared by image and labels.
pub fn augment_light(
    image: &RasterImage,
    labels: &SoftLabelMap,
    rng: &mut impl Rng,
) -> (RasterImage, SoftLabelMap) {
    let draw = AugmentDraw::sample(rng);
    apply_augment(image, labels, &draw)
}

/// Deterministic application of a draw; exposed so tests can pin draws.
pub fn apply_augment(
    image: &RasterImage,
    labels: &SoftLabelMap,
    draw: &AugmentDraw,
) -> (RasterImage, SoftLabelMap) {
    let mut img = image.pixels.clone();
    let mut probs = labels.probs.clone();
    let mut fg: Vec<bool> = labels.foreground.clone();
    let mut amb: Vec<bool> = labels.ambiguous.clone();
    let (mut h, mut w) = (image.height, image.width);

    let mut ops: Vec<GeomOp> = Vec::new();
    if draw.hflip {
        ops.push(GeomOp::HFlip);
    }
    if draw.vflip {
        ops.push(GeomOp::VFlip);
    }
    for _ in 0..draw.quarter_turns {
        ops.push(GeomOp::Rot90);
    }
    for op in ops {
        let (i, _, _) = apply_geom(&img, h, w, 3, op);
        img = i;
        let (p, _, _) = apply_geom(&probs, h, w, labels.classes, op);
        probs = p;
        let (f, _, _) = apply_geom(&fg, h, w, 1, op);
        fg = f;
        let (a, nh, nw) = apply_geom(&amb, h, w, 1, op);
        amb = a;
        h = nh;
        w = nw;
    }

    for pixel in img.chunks_exact_mut(3) {
        for ch in 0..3 {
            pixel[ch] = (pixel[ch] * draw.channel_scale[ch] + draw.channel_offset[ch]).clamp(0.0, 1.0);
        }
    }

    (
        RasterImage {
            height: h,
            width: w,
            pixel_spacing: image.pixel_spacing,
            pixels: img,
        },
        SoftLabelMap {
            height: h,
            width: w,
            classes: labels.classes,
            level: labels.level,
            annotator_count: labels.annotator_count,
            vote_denominator: labels.vote_denominator,
            probs,
            foreground: fg,
            ambiguous: amb,
        },
    )
}
