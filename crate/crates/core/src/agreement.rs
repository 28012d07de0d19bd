//! Inter-rater statistics: Fleiss' kappa, bootstrap confidence intervals,
//! image-level presence tables, and pixel-level agreement breakdowns.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::annotations::AnnotationSet;
use crate::fusion::{strict_argmax, SoftLabelMap, VOTE_TIE_TOL};
use crate::ontology::{Level, Ontology};
use crate::rng::rng_for_index;

/// Kappa with the degenerate case made explicit instead of NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaValue {
    Defined(f64),
    /// Expected agreement is 1 (every rating identical), kappa undefined.
    Undefined,
}

impl KappaValue {
    pub fn value(self) -> Option<f64> {
        match self {
            KappaValue::Defined(v) => Some(v),
            KappaValue::Undefined => None,
        }
    }
}

/// Landis–Koch verbal band for a kappa value.
pub fn landis_koch_band(kappa: f64) -> &'static str {
    if kappa < 0.0 {
        "poor"
    } else if kappa <= 0.20 {
        "slight"
    } else if kappa <= 0.40 {
        "fair"
    } else if kappa <= 0.60 {
        "moderate"
    } else if kappa <= 0.80 {
        "substantial"
    } else {
        "almost perfect"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgreementError {
    NoItems,
    UnequalRaterCounts { expected: usize, got: usize },
    TooFewRaters { got: usize },
    LabelOutOfRange { label: u32 },
    TooFewImages { got: usize },
    AllResamplesDegenerate,
    NonQuantizedProbability { pixel: usize, class: usize },
}

impl fmt::Display for AgreementError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgreementError::NoItems => f.write_str("no items to rate"),
            AgreementError::UnequalRaterCounts { expected, got } => {
                write!(f, "item has {got} ratings, expected {expected}")
            }
            AgreementError::TooFewRaters { got } => {
                write!(f, "need at least 2 raters per item, got {got}")
            }
            AgreementError::LabelOutOfRange { label } => {
                write!(f, "label {label} is not a class of the requested level")
            }
            AgreementError::TooFewImages { got } => {
                write!(f, "bootstrap needs at least 2 images, got {got}")
            }
            AgreementError::AllResamplesDegenerate => {
                f.write_str("every bootstrap resample had undefined kappa")
            }
            AgreementError::NonQuantizedProbability { pixel, class } => write!(
                f,
                "probability at pixel {pixel}, class {class} is not a vote multiple"
            ),
        }
    }
}

impl core::error::Error for AgreementError {}

/// Fleiss' kappa over items × category counts, n raters per item.
///
/// Per item: `P_i = (Σ_j n_ij² − n) / (n(n−1))`; kappa compares mean
/// observed agreement with chance agreement from the pooled category
/// frequencies. Returns [`KappaValue::Undefined`] when chance agreement
/// is exactly 1.
pub fn fleiss_kappa(items: &[Vec<u64>]) -> Result<KappaValue, AgreementError> {
    if items.is_empty() {
        return Err(AgreementError::NoItems);
    }
    let n: u64 = items[0].iter().sum();
    if n < 2 {
        return Err(AgreementError::TooFewRaters { got: n as usize });
    }
    let categories = items[0].len();
    let mut category_totals = vec![0u64; categories];
    let mut p_bar = 0.0f64;
    for item in items {
        let total: u64 = item.iter().sum();
        if total != n || item.len() != categories {
            return Err(AgreementError::UnequalRaterCounts {
                expected: n as usize,
                got: total as usize,
            });
        }
        let sum_sq: u64 = item.iter().map(|&c| c * c).sum();
        p_bar += (sum_sq - n) as f64 / (n * (n - 1)) as f64;
        for (slot, &c) in category_totals.iter_mut().zip(item.iter()) {
            *slot += c;
        }
    }
    p_bar /= items.len() as f64;

    let total_ratings = (items.len() as u64 * n) as f64;
    let p_e: f64 = category_totals
        .iter()
        .map(|&t| {
            let p = t as f64 / total_ratings;
            p * p
        })
        .sum();

    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(KappaValue::Undefined);
    }
    Ok(KappaValue::Defined((p_bar - p_e) / (1.0 - p_e)))
}

/// Per-(image, annotator, label) usage flags at one ontology level.
///
/// Labels exclude benign: presence of benign tissue is not a decision the
/// annotators take per image.
#[derive(Debug, Clone)]
pub struct PresenceTable {
    /// Non-benign class ids at `level`, ascending.
    pub labels: Vec<u32>,
    pub level: Level,
    pub image_ids: Vec<String>,
    /// Group key per image (annotator trio), used for per-group statistics.
    pub groups: Vec<String>,
    pub raters_per_image: usize,
    /// [image][rater][label] flattened.
    used: Vec<bool>,
}

impl PresenceTable {
    /// Builds a table directly from usage flags laid out
    /// [image][rater][label].
    pub fn new(
        labels: Vec<u32>,
        level: Level,
        image_ids: Vec<String>,
        groups: Vec<String>,
        raters_per_image: usize,
        used: Vec<bool>,
    ) -> Result<PresenceTable, AgreementError> {
        if image_ids.is_empty() || labels.is_empty() {
            return Err(AgreementError::NoItems);
        }
        if raters_per_image < 2 {
            return Err(AgreementError::TooFewRaters {
                got: raters_per_image,
            });
        }
        let expected = image_ids.len() * raters_per_image * labels.len();
        if used.len() != expected || groups.len() != image_ids.len() {
            return Err(AgreementError::UnequalRaterCounts {
                expected,
                got: used.len(),
            });
        }
        Ok(PresenceTable {
            labels,
            level,
            image_ids,
            groups,
            raters_per_image,
            used,
        })
    }

    /// Builds the table from one `AnnotationSet` per (image, annotator).
    ///
    /// Sets are grouped by image id; every image must have the same number
    /// of annotators. The group key is the sorted annotator id list.
    pub fn from_annotation_sets(
        sets: &[AnnotationSet],
        ontology: &Ontology,
        level: Level,
    ) -> Result<PresenceTable, AgreementError> {
        if sets.is_empty() {
            return Err(AgreementError::NoItems);
        }
        let labels: Vec<u32> = (1..ontology.class_count(level) as u32).collect();

        let mut image_ids: Vec<String> = Vec::new();
        for set in sets {
            if !image_ids.contains(&set.image_id) {
                image_ids.push(set.image_id.clone());
            }
        }
        let raters_per_image = sets
            .iter()
            .filter(|s| s.image_id == image_ids[0])
            .count();
        if raters_per_image < 2 {
            return Err(AgreementError::TooFewRaters {
                got: raters_per_image,
            });
        }

        let mut used = vec![false; image_ids.len() * raters_per_image * labels.len()];
        let mut groups = vec![String::new(); image_ids.len()];
        for (img_idx, image_id) in image_ids.iter().enumerate() {
            let mut raters: Vec<&AnnotationSet> =
                sets.iter().filter(|s| &s.image_id == image_id).collect();
            if raters.len() != raters_per_image {
                return Err(AgreementError::UnequalRaterCounts {
                    expected: raters_per_image,
                    got: raters.len(),
                });
            }
            raters.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
            let mut key = String::new();
            for (i, rater) in raters.iter().enumerate() {
                if i > 0 {
                    key.push('+');
                }
                key.push_str(&rater.annotator_id);
            }
            groups[img_idx] = key;

            for (rater_idx, rater) in raters.iter().enumerate() {
                for poly in &rater.polygons {
                    for &class in &poly.class_ids {
                        let at_level = ontology
                            .ancestor_at(rater.level, class, level)
                            .map_err(|_| AgreementError::LabelOutOfRange { label: class })?;
                        if at_level == 0 {
                            continue;
                        }
                        let label_idx = (at_level - 1) as usize;
                        used[(img_idx * raters_per_image + rater_idx) * labels.len() + label_idx] =
                            true;
                    }
                }
            }
        }

        Ok(PresenceTable {
            labels,
            level,
            image_ids,
            groups,
            raters_per_image,
            used,
        })
    }

    pub fn images(&self) -> usize {
        self.image_ids.len()
    }

    #[inline]
    pub fn used(&self, image: usize, rater: usize, label_idx: usize) -> bool {
        self.used[(image * self.raters_per_image + rater) * self.labels.len() + label_idx]
    }

    /// Yes-votes for one label on one image.
    fn yes_count(&self, image: usize, label_idx: usize) -> u64 {
        (0..self.raters_per_image)
            .filter(|&r| self.used(image, r, label_idx))
            .count() as u64
    }

    fn image_indices(&self, scope: &Scope) -> Vec<usize> {
        match scope {
            Scope::Global => (0..self.images()).collect(),
            Scope::Group(g) => (0..self.images())
                .filter(|&i| &self.groups[i] == g)
                .collect(),
        }
    }
}

/// Statistic scope: every image, or one annotator group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    Global,
    Group(String),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Group(g) => write!(f, "group:{g}"),
        }
    }
}

/// Kappa plus its provenance, one row of the agreement report.
#[derive(Debug, Clone)]
pub struct KappaReport {
    pub label: Option<u32>,
    pub scope: Scope,
    pub kappa: KappaValue,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub resamples_used: usize,
    pub landis_koch: Option<&'static str>,
}

fn binary_items(presence: &PresenceTable, images: &[usize], label_idx: usize) -> Vec<Vec<u64>> {
    images
        .iter()
        .map(|&img| {
            let yes = presence.yes_count(img, label_idx);
            vec![yes, presence.raters_per_image as u64 - yes]
        })
        .collect()
}

/// Binary Fleiss' kappa for one label over the images in scope.
pub fn kappa_per_label(
    presence: &PresenceTable,
    scope: Scope,
    label: u32,
) -> Result<KappaReport, AgreementError> {
    let label_idx = presence
        .labels
        .iter()
        .position(|&l| l == label)
        .ok_or(AgreementError::LabelOutOfRange { label })?;
    let images = presence.image_indices(&scope);
    let kappa = fleiss_kappa(&binary_items(presence, &images, label_idx))?;
    Ok(KappaReport {
        label: Some(label),
        scope,
        kappa,
        ci_low: None,
        ci_high: None,
        resamples_used: 0,
        landis_koch: kappa.value().map(landis_koch_band),
    })
}

/// Pooled kappa across all (image, label) decisions in scope.
pub fn kappa_pooled(presence: &PresenceTable, scope: Scope) -> Result<KappaReport, AgreementError> {
    let images = presence.image_indices(&scope);
    let mut items = Vec::with_capacity(images.len() * presence.labels.len());
    for label_idx in 0..presence.labels.len() {
        items.extend(binary_items(presence, &images, label_idx));
    }
    let kappa = fleiss_kappa(&items)?;
    Ok(KappaReport {
        label: None,
        scope,
        kappa,
        ci_low: None,
        ci_high: None,
        resamples_used: 0,
        landis_koch: kappa.value().map(landis_koch_band),
    })
}

/// Mean of the per-label kappas in scope (undefined labels skipped).
///
/// The pooled form above is the primary statistic; this average is exposed
/// for comparison.
pub fn kappa_per_label_mean(
    presence: &PresenceTable,
    scope: Scope,
) -> Result<Option<f64>, AgreementError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &label in &presence.labels {
        let report = kappa_per_label(presence, scope.clone(), label)?;
        if let KappaValue::Defined(v) = report.kappa {
            sum += v;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Type-7 (linear interpolation) percentile of a sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let last = sorted.len() - 1;
    let pos = q * last as f64;
    let lo = crate::math::floor(pos) as usize;
    let hi = crate::math::ceil(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bootstrap percentile interval for one label's kappa.
///
/// Images are the resampling unit. Each resample draws its own RNG stream
/// from (seed, resample index), so the interval is identical no matter how
/// resamples are scheduled. Degenerate resamples are excluded and counted
/// via `resamples_used`.
pub fn bootstrap_ci(
    presence: &PresenceTable,
    scope: Scope,
    label: u32,
    resamples: usize,
    seed: u64,
) -> Result<KappaReport, AgreementError> {
    let label_idx = presence
        .labels
        .iter()
        .position(|&l| l == label)
        .ok_or(AgreementError::LabelOutOfRange { label })?;
    let images = presence.image_indices(&scope);
    if images.len() < 2 {
        return Err(AgreementError::TooFewImages { got: images.len() });
    }
    let base = fleiss_kappa(&binary_items(presence, &images, label_idx))?;

    let mut kappas: Vec<f64> = Vec::with_capacity(resamples);
    for resample in 0..resamples {
        let mut rng = rng_for_index(seed, resample as u64);
        let drawn: Vec<usize> = (0..images.len())
            .map(|_| images[rng.random_range(0..images.len())])
            .collect();
        if let KappaValue::Defined(v) = fleiss_kappa(&binary_items(presence, &drawn, label_idx))? {
            kappas.push(v);
        }
    }
    if kappas.is_empty() {
        return Err(AgreementError::AllResamplesDegenerate);
    }
    kappas.sort_unstable_by(|a, b| a.total_cmp(b));
    let lo = percentile(&kappas, 0.025);
    let hi = percentile(&kappas, 0.975);
    Ok(KappaReport {
        label: Some(label),
        scope,
        kappa: base,
        ci_low: Some(lo),
        ci_high: Some(hi),
        resamples_used: kappas.len(),
        landis_koch: base.value().map(landis_koch_band),
    })
}

/// Per-label histogram over "exactly k of n annotators used the label".
///
/// Returns, per label, counts indexed by k = 0..=n.
pub fn presence_heatmap(presence: &PresenceTable) -> Vec<(u32, Vec<u64>)> {
    presence
        .labels
        .iter()
        .enumerate()
        .map(|(label_idx, &label)| {
            let mut counts = vec![0u64; presence.raters_per_image + 1];
            for img in 0..presence.images() {
                counts[presence.yes_count(img, label_idx) as usize] += 1;
            }
            (label, counts)
        })
        .collect()
}

/// Pixel-level agreement over a corpus of fused soft maps.
#[derive(Debug, Clone)]
pub struct PixelAgreementStats {
    pub annotator_count: usize,
    pub classes: usize,
    /// [class][k-1]: share of the class's annotated pixels that k
    /// annotators assigned to it (vote weight rounded up to whole raters).
    pub share_by_agreement: Vec<Vec<f64>>,
    /// Foreground fraction with a strict majority class.
    pub unique_majority_share: f64,
    /// Foreground fraction by number of raters backing the majority class.
    pub majority_strength_share: Vec<f64>,
}

/// Counts annotated pixels per class by agreeing-annotator count, plus the
/// unique-majority share of the foreground.
///
/// Soft values must be vote-quantized: multiples of 1/vote_denominator
/// within 1e-9. Fractional votes (from multi-label splits) count their
/// annotator as agreeing, i.e. vote counts round up.
pub fn pixel_agreement_stats(maps: &[&SoftLabelMap]) -> Result<PixelAgreementStats, AgreementError> {
    if maps.is_empty() {
        return Err(AgreementError::NoItems);
    }
    let k = maps[0].annotator_count;
    let classes = maps[0].classes;
    let mut counts = vec![vec![0u64; k]; classes];
    let mut foreground_pixels = 0u64;
    let mut unique_majority = 0u64;
    let mut majority_strength = vec![0u64; k + 1];

    for map in maps {
        let denom = map.vote_denominator as f64;
        for idx in 0..map.pixels() {
            if !map.foreground[idx] {
                continue;
            }
            foreground_pixels += 1;
            let row = map.pixel(idx);
            for (class, &p) in row.iter().enumerate() {
                let quanta = p * denom;
                if (quanta - crate::math::round(quanta)).abs() > 1e-9 * denom.max(1.0) {
                    return Err(AgreementError::NonQuantizedProbability { pixel: idx, class });
                }
                if p <= 0.0 {
                    continue;
                }
                // Votes in annotator units; partial votes round up.
                let votes = crate::math::ceil(p * k as f64 - 1e-9) as usize;
                let votes = votes.clamp(1, k);
                counts[class][votes - 1] += 1;
            }
            if let Some(best) = strict_argmax(row, VOTE_TIE_TOL) {
                unique_majority += 1;
                let votes = crate::math::ceil(row[best] * k as f64 - 1e-9) as usize;
                majority_strength[votes.min(k)] += 1;
            }
        }
    }

    let share_by_agreement = counts
        .into_iter()
        .map(|per_k| {
            let total: u64 = per_k.iter().sum();
            per_k
                .into_iter()
                .map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
                .collect()
        })
        .collect();

    let fg = foreground_pixels.max(1) as f64;
    Ok(PixelAgreementStats {
        annotator_count: k,
        classes,
        share_by_agreement,
        unique_majority_share: unique_majority as f64 / fg,
        majority_strength_share: majority_strength.iter().map(|&c| c as f64 / fg).collect(),
    })
}

/// Confusion between the grade an area was presented with and the pattern
/// of the explanations drawn on it.
///
/// Rows and columns are pattern ids 1..=3 (benign excluded); each
/// (source grade, annotated pattern) pair counts once per image. Images
/// without grade metadata are skipped and reported.
#[derive(Debug, Clone)]
pub struct GradeConfusion {
    /// 3×3 counts, row = given grade − 1, column = annotated pattern − 1.
    pub counts: [[u64; 3]; 3],
    pub skipped_images: Vec<String>,
}

pub fn grade_annotation_confusion(
    given_grades: &[(String, Vec<u32>)],
    sets: &[AnnotationSet],
    ontology: &Ontology,
) -> Result<GradeConfusion, AgreementError> {
    let mut counts = [[0u64; 3]; 3];
    let mut skipped: Vec<String> = Vec::new();
    let mut image_ids: Vec<&String> = Vec::new();
    for set in sets {
        if !image_ids.contains(&&set.image_id) {
            image_ids.push(&set.image_id);
        }
    }

    for image_id in image_ids {
        let grades = match given_grades.iter().find(|(id, _)| id == image_id) {
            Some((_, grades)) => grades,
            None => {
                skipped.push(image_id.clone());
                continue;
            }
        };
        // Distinct (source grade, annotated pattern) pairs on this image.
        let mut seen: Vec<(u32, u32)> = Vec::new();
        for set in sets.iter().filter(|s| &s.image_id == image_id) {
            for poly in &set.polygons {
                if !grades.contains(&poly.source_grade) {
                    continue;
                }
                for &class in &poly.class_ids {
                    let pattern = ontology
                        .ancestor_at(set.level, class, Level::Pattern)
                        .map_err(|_| AgreementError::LabelOutOfRange { label: class })?;
                    if pattern == 0 {
                        continue;
                    }
                    let pair = (poly.source_grade, pattern);
                    if !seen.contains(&pair) {
                        seen.push(pair);
                    }
                }
            }
        }
        for (grade, pattern) in seen {
            if (1..=3).contains(&grade) && (1..=3).contains(&pattern) {
                counts[(grade - 1) as usize][(pattern - 1) as usize] += 1;
            }
        }
    }

    Ok(GradeConfusion {
        counts,
        skipped_images: skipped,
    })
}
