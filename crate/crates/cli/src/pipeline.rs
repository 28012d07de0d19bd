//! Batch pipelines behind the CLI subcommands: annotation cleaning and
//! fusion, agreement statistics, splitting, training, and evaluation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use softseg_core::annotations::{
    fill_forward_labels, normalize_free_text, rasterize, AnnotatorMask, SynonymTable,
};
use softseg_core::fusion::{build_soft_labels, SoftLabelMap};
use softseg_core::imaging::{foreground_mask, RasterImage};
use softseg_core::inference::{sliding_window_predict, PredictiveMap, SlidingWindowConfig};
use softseg_core::metrics::{evaluate, RunMetrics};
use softseg_core::model::{MiniUNet, TrainingExample};
use softseg_core::ontology::{Level, Ontology};

use crate::formats::manifest::{load_manifest, manifest_paths, LoadedManifest};
use crate::png;

/// Default disk radius for the foreground morphology.
pub const DEFAULT_FOREGROUND_RADIUS: usize = 5;

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")
}

/// Loads every manifest of a corpus directory, sorted by file name.
pub fn load_corpus(manifest_dir: &Path) -> Result<Vec<LoadedManifest>> {
    let paths = manifest_paths(manifest_dir)?;
    if paths.is_empty() {
        bail!("no manifest files (*.json) in {}", manifest_dir.display());
    }
    paths
        .iter()
        .map(|p| load_manifest(p).map_err(Into::into))
        .collect()
}

/// Data-cleaning counters accumulated while preparing one image.
#[derive(Debug, Default, Clone, Copy)]
pub struct CleaningStats {
    pub unmapped_free_text: usize,
    pub dropped_polygons: usize,
    pub seq_ties: usize,
    pub skipped_outside: usize,
}

/// Applies the cleaning rules to one manifest and rasterizes every
/// annotator: free text is mapped through the synonym table, unlabeled
/// polygons inherit the next label by creation order, and multi-label
/// polygons split their vote at paint time.
pub fn rasterize_manifest(
    manifest: &LoadedManifest,
    ontology: &Ontology,
    synonyms: &SynonymTable,
) -> Result<(Vec<AnnotatorMask>, CleaningStats)> {
    let mut stats = CleaningStats::default();
    let mut masks = Vec::with_capacity(manifest.sets.len());
    for set in &manifest.sets {
        let mut cleaned = set.clone();
        for poly in cleaned.polygons.iter_mut() {
            if poly.class_ids.is_empty() {
                if let Some(raw) = &poly.raw_label {
                    match normalize_free_text(raw, ontology, synonyms) {
                        Some(id) => poly.class_ids = vec![id],
                        None => stats.unmapped_free_text += 1,
                    }
                }
            }
        }
        let filled = fill_forward_labels(cleaned.polygons);
        stats.dropped_polygons += filled.dropped;
        stats.seq_ties += filled.seq_ties;
        cleaned.polygons = filled.polygons;
        let outcome = rasterize(&cleaned, ontology)
            .with_context(|| format!("rasterizing {}/{}", set.image_id, set.annotator_id))?;
        stats.skipped_outside += outcome.skipped_outside;
        masks.push(outcome.mask);
    }
    Ok((masks, stats))
}

/// One fully prepared image: pixels, fused soft labels, cleaning counters.
pub struct PreparedImage {
    pub image_id: String,
    pub image: RasterImage,
    pub labels: SoftLabelMap,
    pub stats: CleaningStats,
}

/// Loads the image, computes the tissue mask, rasterizes all annotators,
/// and fuses them into soft labels at `level`.
pub fn prepare_image(
    manifest: &LoadedManifest,
    ontology: &Ontology,
    synonyms: &SynonymTable,
    level: Level,
    foreground_radius: usize,
) -> Result<PreparedImage> {
    let image = png::load_image(&manifest.image_path, manifest.pixel_spacing)
        .with_context(|| format!("loading image for {}", manifest.image_id))?;
    if (image.height, image.width) != manifest.image_size {
        bail!(
            "{}: manifest size {:?} but image is {}x{}",
            manifest.image_id,
            manifest.image_size,
            image.height,
            image.width
        );
    }
    let (masks, stats) = rasterize_manifest(manifest, ontology, synonyms)?;
    let fg = foreground_mask(&image, foreground_radius)?;
    let labels = build_soft_labels(&masks, &fg.mask, level, ontology)?;
    Ok(PreparedImage {
        image_id: manifest.image_id.clone(),
        image,
        labels,
        stats,
    })
}

/// Prepares a whole corpus in parallel, preserving manifest order.
pub fn prepare_corpus(
    manifests: &[LoadedManifest],
    ontology: &Ontology,
    synonyms: &SynonymTable,
    level: Level,
    foreground_radius: usize,
    threads: usize,
) -> Result<Vec<PreparedImage>> {
    let pool = thread_pool(threads)?;
    pool.install(|| {
        manifests
            .par_iter()
            .map(|m| prepare_image(m, ontology, synonyms, level, foreground_radius))
            .collect()
    })
}

/// Per-image class pixel mass at `level` (soft mass summed over the
/// foreground), the splitter's objective input.
pub fn class_mass_vector(labels: &SoftLabelMap) -> Vec<f64> {
    let mut mass = vec![0.0f64; labels.classes];
    for idx in 0..labels.pixels() {
        if labels.foreground[idx] {
            for (c, &p) in labels.pixel(idx).iter().enumerate() {
                mass[c] += p;
            }
        }
    }
    mass
}

pub fn to_training_examples(prepared: Vec<PreparedImage>) -> Vec<TrainingExample> {
    prepared
        .into_iter()
        .map(|p| TrainingExample {
            image: p.image,
            labels: p.labels,
        })
        .collect()
}

/// Sliding-window predictions for a set of images, in parallel.
pub fn predict_images(
    model: &MiniUNet,
    images: &[&RasterImage],
    level: Level,
    config: &SlidingWindowConfig,
    threads: usize,
) -> Result<Vec<PredictiveMap>> {
    let pool = thread_pool(threads)?;
    pool.install(|| {
        images
            .par_iter()
            .map(|image| {
                sliding_window_predict(model, image, level, config).map_err(Into::into)
            })
            .collect()
    })
}

/// Pools predictions and labels over a whole image set and evaluates them
/// as one batch, matching the metrics' global-sum definitions.
pub fn evaluate_corpus(
    preds: &[PredictiveMap],
    labels: &[&SoftLabelMap],
    ontology: &Ontology,
    eval_level: Level,
) -> Result<RunMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        bail!("prediction/label counts differ");
    }
    let classes = preds[0].classes;
    let level = preds[0].level;
    let label_level = labels[0].level;
    let label_classes = labels[0].classes;
    let total_pixels: usize = preds.iter().map(|p| p.pixels()).sum();

    let mut probs = Vec::with_capacity(total_pixels * classes);
    let mut soft_probs = Vec::with_capacity(total_pixels * label_classes);
    let mut foreground = Vec::with_capacity(total_pixels);
    let mut ambiguous = Vec::with_capacity(total_pixels);
    for (pred, soft) in preds.iter().zip(labels.iter()) {
        if pred.classes != classes || pred.level != level || soft.level != label_level {
            bail!("mixed levels or class counts across the image set");
        }
        if pred.pixels() != soft.pixels() {
            bail!("prediction and label sizes differ");
        }
        probs.extend_from_slice(&pred.probs);
        soft_probs.extend_from_slice(&soft.probs);
        foreground.extend_from_slice(&soft.foreground);
        ambiguous.extend_from_slice(&soft.ambiguous);
    }
    let pooled_pred = PredictiveMap {
        height: total_pixels,
        width: 1,
        classes,
        level,
        probs,
        foreground: None,
    };
    let pooled_soft = SoftLabelMap {
        height: total_pixels,
        width: 1,
        classes: label_classes,
        level: label_level,
        annotator_count: labels[0].annotator_count,
        vote_denominator: labels[0].vote_denominator,
        probs: soft_probs,
        foreground,
        ambiguous,
    };
    evaluate(&pooled_pred, &pooled_soft, ontology, eval_level).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::manifest::{AnnotatorSpec, ManifestFile, PolygonSpec};
    use crate::formats::ontology_file::load_default_ontology;
    use crate::synth::{emit_corpus, study_profile};

    #[test]
    fn synthetic_corpus_prepares_with_normalized_soft_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ontology = load_default_ontology();
        let mut profile = study_profile(3);
        profile.size = 48;
        profile.core_radius = 19.0;
        emit_corpus(&profile, &ontology, 2, dir.path(), 2).unwrap();

        let manifests = load_corpus(&dir.path().join("manifests")).unwrap();
        assert_eq!(manifests.len(), 2);
        let synonyms = SynonymTable::new(Level::Explanation);
        let prepared = prepare_corpus(
            &manifests,
            &ontology,
            &synonyms,
            Level::Explanation,
            2,
            2,
        )
        .unwrap();
        for image in &prepared {
            let mut fg = 0usize;
            for idx in 0..image.labels.pixels() {
                if image.labels.foreground[idx] {
                    fg += 1;
                    let sum: f64 = image.labels.pixel(idx).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
            // Otsu recovers a tissue disk of roughly the configured size.
            let disk_area = std::f64::consts::PI * 19.0 * 19.0;
            assert!(
                (fg as f64) > 0.7 * disk_area && (fg as f64) < 1.4 * disk_area,
                "foreground {fg} vs disk {disk_area}"
            );
        }
    }

    #[test]
    fn free_text_and_fill_forward_feed_rasterization() {
        let dir = tempfile::tempdir().unwrap();
        let ontology = load_default_ontology();
        // 4x4 white image with a dark 2x2 square.
        let mut image = RasterImage::new_filled(4, 4, 1.392, 1.0);
        image.set_pixel(1, 1, [0.2, 0.2, 0.2]);
        image.set_pixel(1, 2, [0.2, 0.2, 0.2]);
        image.set_pixel(2, 1, [0.2, 0.2, 0.2]);
        image.set_pixel(2, 2, [0.2, 0.2, 0.2]);
        png::save_image(&dir.path().join("img.png"), &image).unwrap();

        let manifest = ManifestFile {
            image_id: "img".into(),
            image_path: "img.png".into(),
            size: [4, 4],
            pixel_spacing: 1.392,
            level: "sub_explanation".into(),
            annotators: vec![AnnotatorSpec {
                annotator_id: "a".into(),
                polygons: vec![
                    // Free text resolves through the bundled synonyms.
                    PolygonSpec {
                        vertices: vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]],
                        labels: vec![],
                        raw_label: Some("Comedo necrosis".into()),
                        created_seq: 1,
                        source_grade: 3,
                    },
                    // Unlabeled: inherits from the next polygon... which
                    // does not exist, so it drops.
                    PolygonSpec {
                        vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                        labels: vec![],
                        raw_label: None,
                        created_seq: 2,
                        source_grade: 3,
                    },
                ],
            }],
        };
        crate::formats::manifest::save_manifest(&dir.path().join("img.json"), &manifest).unwrap();

        let loaded = load_manifest(&dir.path().join("img.json")).unwrap();
        let synonyms = crate::formats::manifest::load_synonyms(
            None,
            &ontology,
            Level::SubExplanation,
        )
        .unwrap();
        let prepared =
            prepare_image(&loaded, &ontology, &synonyms, Level::Explanation, 0).unwrap();
        assert_eq!(prepared.stats.dropped_polygons, 1);
        assert_eq!(prepared.stats.unmapped_free_text, 0);
        // 5.02 maps to the comedonecrosis explanation (id 6).
        let idx = 1 * 4 + 1;
        assert!(prepared.labels.foreground[idx]);
        assert_eq!(prepared.labels.pixel(idx)[6], 1.0);
    }
}
