//! Combining per-annotator masks into soft labels, majority-vote labels,
//! and STAPLE consensus masks.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::annotations::AnnotatorMask;
use crate::ontology::{Level, Ontology};

/// Argmax that only succeeds when the maximum is unique.
///
/// Two entries tie when they differ by less than `tie_tol`.
pub fn strict_argmax(values: &[f64], tie_tol: f64) -> Option<usize> {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tied = values
        .iter()
        .enumerate()
        .any(|(i, &v)| i != best && (values[best] - v).abs() < tie_tol);
    (!tied && !values.is_empty()).then_some(best)
}

/// Per-pixel probability distribution over classes with masking metadata.
#[derive(Debug, Clone)]
pub struct SoftLabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub level: Level,
    /// Number of annotators fused into this map.
    pub annotator_count: usize,
    /// All probabilities are integer multiples of 1/vote_denominator.
    pub vote_denominator: u32,
    /// Row-major [row][col][class]; zero off foreground.
    pub probs: Vec<f64>,
    pub foreground: Vec<bool>,
    /// True where no class holds a strict plurality; meaningful only on
    /// foreground pixels.
    pub ambiguous: Vec<bool>,
}

impl SoftLabelMap {
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.classes..(idx + 1) * self.classes]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Crops a window; offsets are (row, col).
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> SoftLabelMap {
        assert!(row0 + height <= self.height && col0 + width <= self.width);
        let mut probs = Vec::with_capacity(height * width * self.classes);
        let mut foreground = Vec::with_capacity(height * width);
        let mut ambiguous = Vec::with_capacity(height * width);
        for r in 0..height {
            let src_row = row0 + r;
            let start = (src_row * self.width + col0) * self.classes;
            probs.extend_from_slice(&self.probs[start..start + width * self.classes]);
            let mstart = src_row * self.width + col0;
            foreground.extend_from_slice(&self.foreground[mstart..mstart + width]);
            ambiguous.extend_from_slice(&self.ambiguous[mstart..mstart + width]);
        }
        SoftLabelMap {
            height,
            width,
            classes: self.classes,
            level: self.level,
            annotator_count: self.annotator_count,
            vote_denominator: self.vote_denominator,
            probs,
            foreground,
            ambiguous,
        }
    }

    /// Remaps the distribution to a strict ancestor level, recomputing
    /// ambiguity there.
    pub fn remap_up(
        &self,
        ontology: &Ontology,
        target: Level,
    ) -> Result<SoftLabelMap, crate::ontology::OntologyError> {
        let probs = ontology.remap_up(&self.probs, self.level, target)?;
        let classes = ontology.class_count(target);
        let mut ambiguous = vec![false; self.pixels()];
        for idx in 0..self.pixels() {
            if self.foreground[idx] {
                let row = &probs[idx * classes..(idx + 1) * classes];
                ambiguous[idx] = strict_argmax(row, VOTE_TIE_TOL).is_none();
            }
        }
        Ok(SoftLabelMap {
            height: self.height,
            width: self.width,
            classes,
            level: target,
            annotator_count: self.annotator_count,
            vote_denominator: self.vote_denominator,
            probs,
            foreground: self.foreground.clone(),
            ambiguous,
        })
    }
}

/// Hard labels on pixels with a strict plurality.
#[derive(Debug, Clone)]
pub struct MajorityLabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Defined only where `valid`.
    pub labels: Vec<u32>,
    /// Foreground and unambiguous.
    pub valid: Vec<bool>,
}

/// Vote weights are quantized; differences below this are ties.
pub const VOTE_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FusionError {
    NoAnnotators,
    NeedTwoRaters { got: usize },
    SizeMismatch,
    LevelMismatch,
    ClassOutOfRange { class_id: u32, classes: usize },
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::NoAnnotators => f.write_str("at least one annotator mask is required"),
            FusionError::NeedTwoRaters { got } => {
                write!(f, "STAPLE requires at least two raters, got {got}")
            }
            FusionError::SizeMismatch => f.write_str("input masks disagree on size"),
            FusionError::LevelMismatch => {
                f.write_str("mask level is above the requested fusion level")
            }
            FusionError::ClassOutOfRange { class_id, classes } => {
                write!(f, "class id {class_id} out of range for {classes} classes")
            }
        }
    }
}

impl core::error::Error for FusionError {}

/// Averages annotator votes into a per-pixel distribution.
///
/// On foreground pixels each of the K annotators contributes one unit of
/// weight: their recorded class weights, or weight 1 on benign when they
/// left the pixel unannotated. Off-foreground pixels are zeroed.
pub fn build_soft_labels(
    masks: &[AnnotatorMask],
    foreground: &[bool],
    level: Level,
    ontology: &Ontology,
) -> Result<SoftLabelMap, FusionError> {
    if masks.is_empty() {
        return Err(FusionError::NoAnnotators);
    }
    let height = masks[0].height;
    let width = masks[0].width;
    if foreground.len() != height * width {
        return Err(FusionError::SizeMismatch);
    }

    // Remap finer masks up to the fusion level as needed.
    let mut remapped: Vec<AnnotatorMask> = Vec::with_capacity(masks.len());
    for mask in masks {
        if mask.height != height || mask.width != width {
            return Err(FusionError::SizeMismatch);
        }
        if mask.level.depth() < level.depth() {
            return Err(FusionError::LevelMismatch);
        }
        if mask.level != level {
            remapped.push(mask.remap_up(ontology, level).map_err(|_| FusionError::LevelMismatch)?);
        } else {
            remapped.push(mask.clone());
        }
    }

    let classes = ontology.class_count(level);
    let k = remapped.len();
    let mut denominator = k as u64;
    for mask in &remapped {
        denominator = denominator.max(k as u64 * mask.weight_denominator as u64);
    }

    let mut probs = vec![0.0; height * width * classes];
    let mut ambiguous = vec![false; height * width];
    let inv_k = 1.0 / k as f64;
    for idx in 0..height * width {
        if !foreground[idx] {
            continue;
        }
        let row = &mut probs[idx * classes..(idx + 1) * classes];
        for mask in &remapped {
            let entries = mask.pixel(idx);
            let mut used = 0.0;
            for &(class, weight) in entries {
                let class = class as usize;
                if class >= classes {
                    return Err(FusionError::ClassOutOfRange {
                        class_id: class as u32,
                        classes,
                    });
                }
                row[class] += weight * inv_k;
                used += weight;
            }
            // Unannotated (or underweight) pixels vote benign.
            if used < 1.0 {
                row[0] += (1.0 - used) * inv_k;
            }
        }
        ambiguous[idx] = strict_argmax(row, VOTE_TIE_TOL).is_none();
    }

    Ok(SoftLabelMap {
        height,
        width,
        classes,
        level,
        annotator_count: k,
        vote_denominator: denominator as u32,
        probs,
        foreground: foreground.to_vec(),
        ambiguous,
    })
}

/// Picks the strict-plurality class per pixel; ties are invalid.
pub fn majority_vote(soft: &SoftLabelMap) -> MajorityLabelMap {
    let pixels = soft.pixels();
    let mut labels = vec![0u32; pixels];
    let mut valid = vec![false; pixels];
    for idx in 0..pixels {
        if !soft.foreground[idx] {
            continue;
        }
        if let Some(best) = strict_argmax(soft.pixel(idx), VOTE_TIE_TOL) {
            labels[idx] = best as u32;
            valid[idx] = true;
        }
    }
    MajorityLabelMap {
        height: soft.height,
        width: soft.width,
        classes: soft.classes,
        labels,
        valid,
    }
}

/// Parameters of the STAPLE EM iteration.
#[derive(Debug, Clone, Copy)]
pub struct StapleParams {
    pub init_sensitivity: f64,
    pub init_specificity: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StapleParams {
    fn default() -> Self {
        StapleParams {
            init_sensitivity: 0.99999,
            init_specificity: 0.99999,
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

const PARAM_CLAMP: f64 = 1e-6;

/// Binary STAPLE output.
#[derive(Debug, Clone)]
pub struct BinaryStapleResult {
    /// Per-pixel posterior P(true label = foreground).
    pub posterior_fg: Vec<f64>,
    pub consensus: Vec<bool>,
    /// Per-rater estimates.
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Raters that were all-positive or all-negative (parameters clamped).
    pub degenerate_raters: usize,
}

/// Estimates a binary consensus and per-rater quality via EM.
///
/// The foreground prior is fixed at the empirical mean foreground fraction
/// of the input masks. Iteration stops when no sensitivity or specificity
/// moves by `tol`, or after `max_iter` rounds.
pub fn staple(masks: &[Vec<bool>], params: &StapleParams) -> Result<BinaryStapleResult, FusionError> {
    let k = masks.len();
    if k < 2 {
        return Err(FusionError::NeedTwoRaters { got: k });
    }
    let pixels = masks[0].len();
    if masks.iter().any(|m| m.len() != pixels) || pixels == 0 {
        return Err(FusionError::SizeMismatch);
    }

    let degenerate_raters = masks
        .iter()
        .filter(|m| m.iter().all(|&d| d) || m.iter().all(|&d| !d))
        .count();

    let total_fg: usize = masks.iter().map(|m| m.iter().filter(|&&d| d).count()).sum();
    let prior = (total_fg as f64 / (k * pixels) as f64).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);

    let clamp = |v: f64| v.clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);
    let mut sens = vec![clamp(params.init_sensitivity); k];
    let mut spec = vec![clamp(params.init_specificity); k];
    let mut posterior = vec![0.0f64; pixels];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iter {
        iterations += 1;
        // E-step: posterior of the true label per pixel.
        for i in 0..pixels {
            let mut a = prior;
            let mut b = 1.0 - prior;
            for j in 0..k {
                if masks[j][i] {
                    a *= sens[j];
                    b *= 1.0 - spec[j];
                } else {
                    a *= 1.0 - sens[j];
                    b *= spec[j];
                }
            }
            posterior[i] = a / (a + b);
        }
        // M-step: per-rater parameters from the posterior.
        let sum_w: f64 = posterior.iter().sum();
        let sum_not_w = pixels as f64 - sum_w;
        let mut max_delta = 0.0f64;
        for j in 0..k {
            let mut w_pos = 0.0;
            let mut notw_neg = 0.0;
            for i in 0..pixels {
                if masks[j][i] {
                    w_pos += posterior[i];
                } else {
                    notw_neg += 1.0 - posterior[i];
                }
            }
            let new_sens = clamp(if sum_w > 0.0 { w_pos / sum_w } else { 0.5 });
            let new_spec = clamp(if sum_not_w > 0.0 { notw_neg / sum_not_w } else { 0.5 });
            max_delta = max_delta
                .max((new_sens - sens[j]).abs())
                .max((new_spec - spec[j]).abs());
            sens[j] = new_sens;
            spec[j] = new_spec;
        }
        if max_delta < params.tol {
            converged = true;
            break;
        }
    }

    let consensus = posterior.iter().map(|&w| w > 0.5).collect();
    Ok(BinaryStapleResult {
        posterior_fg: posterior,
        consensus,
        sensitivity: sens,
        specificity: spec,
        iterations,
        converged,
        degenerate_raters,
    })
}

/// Multi-class STAPLE output.
#[derive(Debug, Clone)]
pub struct StapleResult {
    pub classes: usize,
    /// H·W×C, renormalized per pixel; rows sum to 1.
    pub posterior: Vec<f64>,
    pub consensus: Vec<u32>,
    /// K×C, one column per one-vs-rest run.
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Pixels whose argmax tied and broke toward the lower class id.
    pub tie_breaks: usize,
}

/// One-vs-rest STAPLE per class, argmax of renormalized posteriors.
pub fn staple_multiclass(
    masks: &[Vec<u32>],
    classes: usize,
    params: &StapleParams,
) -> Result<StapleResult, FusionError> {
    let k = masks.len();
    if k < 2 {
        return Err(FusionError::NeedTwoRaters { got: k });
    }
    let pixels = masks[0].len();
    if masks.iter().any(|m| m.len() != pixels) || pixels == 0 {
        return Err(FusionError::SizeMismatch);
    }
    for mask in masks {
        if let Some(&bad) = mask.iter().find(|&&c| c as usize >= classes) {
            return Err(FusionError::ClassOutOfRange {
                class_id: bad,
                classes,
            });
        }
    }

    let mut posterior = vec![0.0f64; pixels * classes];
    let mut sensitivity = vec![0.0f64; k * classes];
    let mut specificity = vec![0.0f64; k * classes];
    let mut iterations = 0;
    let mut converged = true;
    for class in 0..classes {
        let binary: Vec<Vec<bool>> = masks
            .iter()
            .map(|m| m.iter().map(|&c| c as usize == class).collect())
            .collect();
        let result = staple(&binary, params)?;
        for i in 0..pixels {
            posterior[i * classes + class] = result.posterior_fg[i];
        }
        for j in 0..k {
            sensitivity[j * classes + class] = result.sensitivity[j];
            specificity[j * classes + class] = result.specificity[j];
        }
        iterations = iterations.max(result.iterations);
        converged &= result.converged;
    }

    let mut consensus = vec![0u32; pixels];
    let mut tie_breaks = 0usize;
    for i in 0..pixels {
        let row = &mut posterior[i * classes..(i + 1) * classes];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        } else {
            let uniform = 1.0 / classes as f64;
            row.fill(uniform);
        }
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        if row.iter().enumerate().any(|(c, &v)| c != best && v == row[best]) {
            tie_breaks += 1;
            best = row
                .iter()
                .enumerate()
                .find(|&(_, &v)| v == row[best])
                .map(|(c, _)| c)
                .unwrap();
        }
        consensus[i] = best as u32;
    }

    Ok(StapleResult {
        classes,
        posterior,
        consensus,
        sensitivity,
        specificity,
        iterations,
        converged,
        tie_breaks,
    })
}
