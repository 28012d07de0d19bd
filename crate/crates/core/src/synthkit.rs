//! Synthetic core-like scenes and simulated disagreeing annotators, for
//! desk-scale validation of the full pipeline.
//!
//! A scene is a dark textured disk on a white background, partitioned into
//! Voronoi regions whose classes are drawn from a prior. Raters relabel
//! each region through a row-stochastic confusion matrix and perturb its
//! boundary by a per-region radius, modeling structured (region-level)
//! disagreement rather than i.i.d. pixel noise.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::AnnotatorMask;
use crate::imaging::RasterImage;
use crate::math;
use crate::ontology::Level;
use crate::rng::rng_for_index;

/// Appearance of one class inside the disk.
#[derive(Debug, Clone)]
pub struct ClassTexture {
    pub base_color: [f64; 3],
    /// Stripe spatial frequency in cycles/px; 0 disables stripes.
    pub stripe_freq: f64,
    /// Stripe orientation in radians.
    pub stripe_angle: f64,
    /// Uniform noise amplitude added per pixel.
    pub noise_amp: f64,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Square image side length.
    pub size: usize,
    pub core_radius: f64,
    /// Voronoi seed count per scene.
    pub region_count: usize,
    /// Per-class texture, indexed by class id at `level`.
    pub palette: Vec<ClassTexture>,
    /// Level of the class ids (the pipeline's fine level).
    pub level: Level,
    pub rater_count: usize,
    /// Row-stochastic class confusion ρ: ρ[true][observed].
    pub confusion: Vec<Vec<f64>>,
    /// Boundary jitter radius j; per-region offsets are uniform in [−j, j].
    pub boundary_jitter: f64,
    /// Class prior over region labels.
    pub class_prior: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadPrior { sum: f64 },
    BadConfusionRow { row: usize, sum: f64 },
    ShapeMismatch { expected: usize, got: usize },
    NegativeJitter(f64),
    Empty(&'static str),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadPrior { sum } => write!(f, "class prior sums to {sum}, expected 1"),
            SynthError::BadConfusionRow { row, sum } => {
                write!(f, "confusion row {row} sums to {sum}, expected 1")
            }
            SynthError::ShapeMismatch { expected, got } => {
                write!(f, "expected {expected} classes, got {got}")
            }
            SynthError::NegativeJitter(j) => write!(f, "boundary jitter {j} must be >= 0"),
            SynthError::Empty(what) => write!(f, "{what} must be non-empty"),
        }
    }
}

impl core::error::Error for SynthError {}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let classes = self.palette.len();
        if classes == 0 {
            return Err(SynthError::Empty("palette"));
        }
        if self.region_count == 0 {
            return Err(SynthError::Empty("region_count"));
        }
        if self.size == 0 || self.core_radius <= 0.0 {
            return Err(SynthError::Empty("size/core_radius"));
        }
        if self.class_prior.len() != classes {
            return Err(SynthError::ShapeMismatch {
                expected: classes,
                got: self.class_prior.len(),
            });
        }
        let prior_sum: f64 = self.class_prior.iter().sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::BadPrior { sum: prior_sum });
        }
        if self.confusion.len() != classes {
            return Err(SynthError::ShapeMismatch {
                expected: classes,
                got: self.confusion.len(),
            });
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.len() != classes {
                return Err(SynthError::ShapeMismatch {
                    expected: classes,
                    got: row.len(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SynthError::BadConfusionRow { row: i, sum });
            }
        }
        if self.boundary_jitter < 0.0 {
            return Err(SynthError::NegativeJitter(self.boundary_jitter));
        }
        Ok(())
    }
}

/// Ground truth of one scene, including the region structure raters
/// perturb.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub height: usize,
    pub width: usize,
    pub level: Level,
    /// Per-pixel class; 0 outside the disk.
    pub labels: Vec<u32>,
    /// Per-pixel region index (meaningful inside the disk).
    pub region_of: Vec<u32>,
    pub region_labels: Vec<u32>,
    pub seeds: Vec<(f64, f64)>,
    pub disk: Vec<bool>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> u32 {
    let draw: f64 = rng.random_range(0.0..1.0);
    let mut cumulative = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cumulative += w;
        if draw < cumulative {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// Assigns every disk pixel to the region minimizing dist − offset (an
/// additively weighted Voronoi diagram); ties go to the lower index.
fn assign_regions(
    seeds: &[(f64, f64)],
    offsets: &[f64],
    disk: &[bool],
    size: usize,
) -> Vec<u32> {
    let mut region_of = vec![0u32; size * size];
    for row in 0..size {
        for col in 0..size {
            let idx = row * size + col;
            if !disk[idx] {
                continue;
            }
            let x = col as f64 + 0.5;
            let y = row as f64 + 0.5;
            let mut best = 0usize;
            let mut best_score = f64::INFINITY;
            for (i, &(sx, sy)) in seeds.iter().enumerate() {
                let score = math::hypot(x - sx, y - sy) - offsets[i];
                if score < best_score {
                    best_score = score;
                    best = i;
                }
            }
            region_of[idx] = best as u32;
        }
    }
    region_of
}

/// Renders scene `scene_index` of the corpus defined by `config`.
///
/// Deterministic in (config.seed, scene_index). Draw order: Voronoi seeds,
/// region labels, then per-pixel texture noise over disk pixels in
/// row-major order.
pub fn generate_scene(config: &SynthConfig, scene_index: u64) -> Result<(RasterImage, SceneTruth), SynthError> {
    config.validate()?;
    let size = config.size;
    let mut rng = rng_for_index(config.seed, scene_index);

    let center = size as f64 / 2.0;
    let radius = config.core_radius;
    let mut disk = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let x = col as f64 + 0.5 - center;
            let y = row as f64 + 0.5 - center;
            disk[row * size + col] = x * x + y * y <= radius * radius;
        }
    }

    // Seeds uniform in the disk, by rejection.
    let mut seeds = Vec::with_capacity(config.region_count);
    while seeds.len() < config.region_count {
        let x: f64 = rng.random_range(0.0..size as f64);
        let y: f64 = rng.random_range(0.0..size as f64);
        let dx = x - center;
        let dy = y - center;
        if dx * dx + dy * dy <= radius * radius {
            seeds.push((x, y));
        }
    }

    let region_labels: Vec<u32> = (0..config.region_count)
        .map(|_| sample_categorical(&mut rng, &config.class_prior))
        .collect();

    let offsets = vec![0.0f64; config.region_count];
    let region_of = assign_regions(&seeds, &offsets, &disk, size);
    let labels: Vec<u32> = (0..size * size)
        .map(|idx| {
            if disk[idx] {
                region_labels[region_of[idx] as usize]
            } else {
                0
            }
        })
        .collect();

    // Texture: white background, striped and noisy class colors inside.
    let mut image = RasterImage::new_filled(size, size, 1.392, 1.0);
    for row in 0..size {
        for col in 0..size {
            let idx = row * size + col;
            if !disk[idx] {
                continue;
            }
            let tex = &config.palette[labels[idx] as usize];
            let phase = 2.0
                * core::f64::consts::PI
                * tex.stripe_freq
                * ((col as f64) * math::cos(tex.stripe_angle)
                    + (row as f64) * math::sin(tex.stripe_angle));
            let stripe = if tex.stripe_freq > 0.0 { 0.06 * math::sin(phase) } else { 0.0 };
            let noise: f64 = rng.random_range(-1.0..1.0) * tex.noise_amp;
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                rgb[ch] = (tex.base_color[ch] + stripe + noise).clamp(0.0, 1.0);
            }
            image.set_pixel(row, col, rgb);
        }
    }

    Ok((
        image,
        SceneTruth {
            height: size,
            width: size,
            level: config.level,
            labels,
            region_of,
            region_labels,
            seeds,
            disk,
        },
    ))
}

/// Simulates one rater: every region's label is redrawn from the confusion
/// row of its true class, and region boundaries shift by per-region radii
/// uniform in [−j, j]. With the identity confusion and j = 0 the rater
/// reproduces the truth exactly.
///
/// Draw order: region labels, then region radii (radii skipped when j = 0).
pub fn simulate_rater(
    truth: &SceneTruth,
    confusion: &[Vec<f64>],
    boundary_jitter: f64,
    seed: u64,
    rater_index: u64,
) -> Result<AnnotatorMask, SynthError> {
    if boundary_jitter < 0.0 {
        return Err(SynthError::NegativeJitter(boundary_jitter));
    }
    let regions = truth.region_labels.len();
    let mut rng = rng_for_index(seed, rater_index);

    let rater_labels: Vec<u32> = truth
        .region_labels
        .iter()
        .map(|&true_class| {
            let row = &confusion[true_class as usize];
            sample_categorical(&mut rng, row)
        })
        .collect();

    let region_of = if boundary_jitter == 0.0 {
        truth.region_of.clone()
    } else {
        let offsets: Vec<f64> = (0..regions)
            .map(|_| rng.random_range(-boundary_jitter..boundary_jitter))
            .collect();
        assign_regions(&truth.seeds, &offsets, &truth.disk, truth.width)
    };

    let labels: Vec<Option<u32>> = (0..truth.height * truth.width)
        .map(|idx| {
            truth.disk[idx].then(|| rater_labels[region_of[idx] as usize])
        })
        .collect();
    Ok(AnnotatorMask::from_dense(
        &labels,
        truth.height,
        truth.width,
        truth.level,
    ))
}

/// Per-pixel label map of a rater mask (weight-1 masks only).
pub fn mask_to_labels(mask: &AnnotatorMask) -> Vec<Option<u32>> {
    (0..mask.height * mask.width)
        .map(|idx| {
            let entries = mask.pixel(idx);
            entries.first().map(|&(class, _)| class)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::build_soft_labels;
    use crate::ontology::{Ontology, OntologyNode};
    use alloc::string::ToString;

    fn flat_ontology(classes: u32) -> Ontology {
        let mut nodes = Vec::new();
        for level in [Level::Pattern, Level::Explanation, Level::SubExplanation] {
            for id in 0..classes {
                nodes.push(OntologyNode {
                    id,
                    name: alloc::format!("{level}-{id}"),
                    short_name: id.to_string(),
                    level,
                    parent_id: (level != Level::Pattern).then_some(id),
                    color: [0, 0, 0],
                });
            }
        }
        Ontology::new(nodes).unwrap()
    }

    fn identity_confusion(classes: usize) -> Vec<Vec<f64>> {
        (0..classes)
            .map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn toy_config(classes: usize, seed: u64) -> SynthConfig {
        let palette = (0..classes)
            .map(|i| ClassTexture {
                base_color: [0.2 + 0.1 * (i % 4) as f64, 0.3, 0.4],
                stripe_freq: 0.1 * i as f64,
                stripe_angle: 0.7 * i as f64,
                noise_amp: 0.02,
            })
            .collect();
        let mut prior = alloc::vec![0.0; classes];
        for (i, p) in prior.iter_mut().enumerate() {
            *p = (i + 1) as f64;
        }
        let total: f64 = prior.iter().sum();
        for p in prior.iter_mut() {
            *p /= total;
        }
        SynthConfig {
            size: 48,
            core_radius: 20.0,
            region_count: 8,
            palette,
            level: Level::Explanation,
            rater_count: 3,
            confusion: identity_confusion(classes),
            boundary_jitter: 0.0,
            class_prior: prior,
            seed,
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let config = toy_config(4, 7);
        let (img_a, truth_a) = generate_scene(&config, 3).unwrap();
        let (img_b, truth_b) = generate_scene(&config, 3).unwrap();
        assert_eq!(img_a.pixels, img_b.pixels);
        assert_eq!(truth_a.labels, truth_b.labels);
        let (img_c, _) = generate_scene(&config, 4).unwrap();
        assert_ne!(img_a.pixels, img_c.pixels);
    }

    #[test]
    fn one_hot_prior_yields_single_class_disk() {
        let mut config = toy_config(3, 1);
        config.class_prior = alloc::vec![0.0, 1.0, 0.0];
        let (_, truth) = generate_scene(&config, 0).unwrap();
        for idx in 0..truth.labels.len() {
            if truth.disk[idx] {
                assert_eq!(truth.labels[idx], 1);
            }
        }
    }

    #[test]
    fn faithful_rater_reproduces_truth() {
        let config = toy_config(4, 5);
        let (_, truth) = generate_scene(&config, 2).unwrap();
        let mask = simulate_rater(&truth, &config.confusion, 0.0, 99, 0).unwrap();
        let labels = mask_to_labels(&mask);
        for idx in 0..truth.labels.len() {
            if truth.disk[idx] {
                assert_eq!(labels[idx], Some(truth.labels[idx]));
            } else {
                assert_eq!(labels[idx], None);
            }
        }
    }

    #[test]
    fn faithful_raters_fuse_to_one_hot_truth() {
        let config = toy_config(4, 13);
        let ont = flat_ontology(4);
        let (_, truth) = generate_scene(&config, 1).unwrap();
        let masks: Vec<AnnotatorMask> = (0..3)
            .map(|r| simulate_rater(&truth, &config.confusion, 0.0, 4, r).unwrap())
            .collect();
        let soft = build_soft_labels(&masks, &truth.disk, Level::Explanation, &ont).unwrap();
        for idx in 0..truth.labels.len() {
            if truth.disk[idx] {
                let row = soft.pixel(idx);
                assert_eq!(row[truth.labels[idx] as usize], 1.0);
            }
        }
    }

    #[test]
    fn uniform_confusion_scatters_labels() {
        let classes = 4usize;
        let mut config = toy_config(classes, 21);
        config.region_count = 40;
        config.size = 64;
        config.core_radius = 28.0;
        let uniform = alloc::vec![alloc::vec![1.0 / classes as f64; classes]; classes];
        let mut counts = alloc::vec![0u64; classes];
        for scene in 0..25u64 {
            let (_, truth) = generate_scene(&config, scene).unwrap();
            let mask = simulate_rater(&truth, &uniform, 0.0, 77, scene).unwrap();
            // Count once per region via its label at the seed pixel.
            let labels = mask_to_labels(&mask);
            for idx in 0..labels.len() {
                if let Some(l) = labels[idx] {
                    counts[l as usize] += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        for &c in &counts {
            let share = c as f64 / total as f64;
            // Pixel-weighted shares fluctuate with region sizes; a loose
            // band is enough to catch systematic skew.
            assert!(share > 0.10 && share < 0.45, "share {share}");
        }
    }

    #[test]
    fn jitter_moves_boundaries_but_keeps_disk() {
        let config = toy_config(4, 31);
        let (_, truth) = generate_scene(&config, 0).unwrap();
        let jittered = simulate_rater(&truth, &config.confusion, 4.0, 55, 0).unwrap();
        let labels = mask_to_labels(&jittered);
        let mut changed = 0usize;
        for idx in 0..truth.labels.len() {
            assert_eq!(labels[idx].is_some(), truth.disk[idx]);
            if truth.disk[idx] && labels[idx] != Some(truth.labels[idx]) {
                changed += 1;
            }
        }
        assert!(changed > 0, "jitter should move at least one boundary pixel");
    }

    #[test]
    fn prior_histogram_converges() {
        let config = toy_config(3, 41);
        let mut counts = alloc::vec![0u64; 3];
        let scenes = 1000u64;
        for scene in 0..scenes {
            let (_, truth) = generate_scene(&config, scene).unwrap();
            for &l in &truth.region_labels {
                counts[l as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        for (i, &c) in counts.iter().enumerate() {
            let share = c as f64 / total as f64;
            assert!(
                (share - config.class_prior[i]).abs() < 0.02,
                "class {i}: {share} vs prior {}",
                config.class_prior[i]
            );
        }
    }
}
