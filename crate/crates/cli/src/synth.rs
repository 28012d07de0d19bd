//! Synthetic corpus emission: scenes as PNG images plus per-image
//! annotation manifests, so the regular pipeline runs on synthetic data
//! unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};
use softseg_core::ontology::{Level, Ontology};
use softseg_core::synthkit::{self, ClassTexture, SceneTruth, SynthConfig};

use crate::formats::manifest::{AnnotatorSpec, ManifestFile, PolygonSpec};
use crate::formats::{reports, FormatError};
use crate::png;

/// Serializable mirror of [`SynthConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthProfile {
    pub size: usize,
    pub core_radius: f64,
    pub region_count: usize,
    pub level: String,
    pub rater_count: usize,
    pub boundary_jitter: f64,
    /// Per-class [r, g, b, stripe_freq, stripe_angle, noise_amp].
    pub palette: Vec<[f64; 6]>,
    pub class_prior: Vec<f64>,
    pub confusion: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SynthProfile {
    pub fn to_config(&self) -> Result<SynthConfig, String> {
        let level: Level = self.level.parse()?;
        let config = SynthConfig {
            size: self.size,
            core_radius: self.core_radius,
            region_count: self.region_count,
            palette: self
                .palette
                .iter()
                .map(|&[r, g, b, freq, angle, noise]| ClassTexture {
                    base_color: [r, g, b],
                    stripe_freq: freq,
                    stripe_angle: angle,
                    noise_amp: noise,
                })
                .collect(),
            level,
            rater_count: self.rater_count,
            confusion: self.confusion.clone(),
            boundary_jitter: self.boundary_jitter,
            class_prior: self.class_prior.clone(),
            seed: self.seed,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

/// The built-in study profile: 10 explanation-level classes matching the
/// bundled ontology, heavy class imbalance, and raters that agree on the
/// coarse pattern far more than on the fine explanation. The four rarest
/// classes (the GP5 explanations) leak a large share of their votes into
/// benign, so their majority labels are mostly lost while their soft
/// labels keep the mass.
pub fn study_profile(seed: u64) -> SynthProfile {
    let palette: Vec<[f64; 6]> = vec![
        // base RGB, stripe freq, stripe angle, noise amplitude
        [0.62, 0.55, 0.62, 0.00, 0.0, 0.020], // benign: dusky pink, clearly darker than the slide
        [0.55, 0.30, 0.45, 0.12, 0.3, 0.030], // individual glands
        [0.45, 0.42, 0.20, 0.22, 1.2, 0.030], // compressed glands
        [0.25, 0.45, 0.55, 0.08, 0.8, 0.030], // cribriform
        [0.62, 0.50, 0.25, 0.30, 2.1, 0.030], // glomeruloid
        [0.35, 0.25, 0.55, 0.16, 1.7, 0.030], // poorly formed
        [0.18, 0.18, 0.18, 0.00, 0.0, 0.025], // comedonecrosis: near-black
        [0.55, 0.55, 0.35, 0.26, 0.5, 0.030], // cords
        [0.30, 0.50, 0.30, 0.10, 2.6, 0.030], // groups of tumor cells
        [0.50, 0.20, 0.20, 0.20, 1.0, 0.030], // single cells
    ];
    // >= 20:1 imbalance between the most and least common fine class.
    let class_prior = vec![0.295, 0.30, 0.06, 0.14, 0.04, 0.10, 0.015, 0.025, 0.015, 0.01];

    // Confusion: GP3/GP4 explanations are confused mostly within their
    // pattern; the GP5 explanations lose most votes to benign and spread
    // the rest over their siblings.
    let mut confusion = vec![vec![0.0f64; 10]; 10];
    confusion[0] = vec![0.90, 0.05, 0.0, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0];
    confusion[1] = vec![0.05, 0.70, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    confusion[2] = vec![0.05, 0.30, 0.65, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    confusion[3] = vec![0.05, 0.0, 0.0, 0.60, 0.15, 0.20, 0.0, 0.0, 0.0, 0.0];
    confusion[4] = vec![0.05, 0.0, 0.0, 0.25, 0.50, 0.20, 0.0, 0.0, 0.0, 0.0];
    confusion[5] = vec![0.05, 0.0, 0.0, 0.20, 0.10, 0.65, 0.0, 0.0, 0.0, 0.0];
    for class in 6..10 {
        let mut row = vec![0.0; 10];
        row[0] = 0.40;
        for sibling in 6..10 {
            row[sibling] = if sibling == class { 0.24 } else { 0.12 };
        }
        confusion[class] = row;
    }

    SynthProfile {
        size: 64,
        core_radius: 26.0,
        region_count: 7,
        level: "explanation".to_string(),
        rater_count: 3,
        boundary_jitter: 1.5,
        palette,
        class_prior,
        confusion,
        seed,
    }
}

/// Greedy row-run rectangles reproducing a dense label map exactly under
/// the even-odd pixel-center rasterization rule.
fn label_map_to_polygons(
    labels: &[Option<u32>],
    height: usize,
    width: usize,
    ontology: &Ontology,
    level: Level,
) -> Vec<PolygonSpec> {
    let mut polygons = Vec::new();
    let mut seq = 0u64;
    for row in 0..height {
        let mut col = 0usize;
        while col < width {
            let Some(class) = labels[row * width + col] else {
                col += 1;
                continue;
            };
            let mut end = col + 1;
            while end < width && labels[row * width + end] == Some(class) {
                end += 1;
            }
            seq += 1;
            let grade = ontology
                .ancestor_at(level, class, Level::Pattern)
                .unwrap_or(0);
            polygons.push(PolygonSpec {
                vertices: vec![
                    [col as f64, row as f64],
                    [end as f64, row as f64],
                    [end as f64, row as f64 + 1.0],
                    [col as f64, row as f64 + 1.0],
                ],
                labels: vec![class],
                raw_label: None,
                created_seq: seq,
                source_grade: grade,
            });
            col = end;
        }
    }
    polygons
}

pub struct EmittedScene {
    pub image_id: String,
    pub truth: SceneTruth,
}

/// Writes scene `index` of the corpus: PNG image, per-rater manifest, and
/// the truth's given-grade entry. Returns the truth for callers that need
/// it (tests, grade files).
pub fn emit_scene(
    profile: &SynthProfile,
    ontology: &Ontology,
    index: u64,
    images_dir: &Path,
    manifests_dir: &Path,
) -> Result<EmittedScene, FormatError> {
    let config = profile
        .to_config()
        .map_err(|e| FormatError::parse(Path::new("<synth profile>"), e))?;
    let (image, truth) = synthkit::generate_scene(&config, index)
        .map_err(|e| FormatError::parse(Path::new("<synth profile>"), e.to_string()))?;
    let image_id = format!("scene_{index:04}");

    png::save_image(&images_dir.join(format!("{image_id}.png")), &image)?;

    let mut annotators = Vec::with_capacity(config.rater_count);
    for rater in 0..config.rater_count {
        let mask = synthkit::simulate_rater(
            &truth,
            &config.confusion,
            config.boundary_jitter,
            // Streams keyed by (corpus seed, scene, rater).
            config.seed ^ (index.wrapping_mul(0x9e3779b97f4a7c15)),
            rater as u64,
        )
        .map_err(|e| FormatError::parse(Path::new("<synth profile>"), e.to_string()))?;
        let labels = synthkit::mask_to_labels(&mask);
        annotators.push(AnnotatorSpec {
            annotator_id: format!("r{rater}"),
            polygons: label_map_to_polygons(&labels, truth.height, truth.width, ontology, config.level),
        });
    }

    let manifest = ManifestFile {
        image_id: image_id.clone(),
        image_path: format!("../images/{image_id}.png"),
        size: [truth.height, truth.width],
        pixel_spacing: 1.392,
        level: config.level.name().to_string(),
        annotators,
    };
    crate::formats::manifest::save_manifest(
        &manifests_dir.join(format!("{image_id}.json")),
        &manifest,
    )?;

    Ok(EmittedScene { image_id, truth })
}

/// Patterns present in a truth map, for the given-grades file.
pub fn truth_grades(truth: &SceneTruth, ontology: &Ontology) -> Vec<u32> {
    let mut grades: Vec<u32> = truth
        .region_labels
        .iter()
        .filter_map(|&class| {
            let pattern = ontology.ancestor_at(truth.level, class, Level::Pattern).ok()?;
            (pattern != 0).then_some(pattern)
        })
        .collect();
    grades.sort_unstable();
    grades.dedup();
    grades
}

/// Emits a whole corpus under `out_dir` (images/, manifests/, grades.json).
pub fn emit_corpus(
    profile: &SynthProfile,
    ontology: &Ontology,
    count: usize,
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<String>, FormatError> {
    let images_dir = out_dir.join("images");
    let manifests_dir = out_dir.join("manifests");
    std::fs::create_dir_all(&images_dir).map_err(|e| FormatError::io(&images_dir, e))?;
    std::fs::create_dir_all(&manifests_dir).map_err(|e| FormatError::io(&manifests_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FormatError::parse(out_dir, e.to_string()))?;
    let results: Result<Vec<(String, Vec<u32>)>, FormatError> = pool.install(|| {
        use rayon::prelude::*;
        (0..count as u64)
            .into_par_iter()
            .map(|index| {
                let scene = emit_scene(profile, ontology, index, &images_dir, &manifests_dir)?;
                let grades = truth_grades(&scene.truth, ontology);
                Ok((scene.image_id, grades))
            })
            .collect()
    });
    let results = results?;

    let grades: std::collections::BTreeMap<String, Vec<u32>> = results.iter().cloned().collect();
    reports::write_json(&out_dir.join("grades.json"), &grades)?;
    Ok(results.into_iter().map(|(id, _)| id).collect())
}
