//! Evaluation metrics under the foreground/ambiguity masking rules, with
//! remapped-level evaluation.
//!
//! Soft metrics (Macro SoftDice, L1) compare distributions on foreground
//! pixels; hard metrics (Dice, Macro Dice, confusion) compare argmax
//! predictions with majority-vote labels on foreground pixels that have an
//! unambiguous majority.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fusion::{strict_argmax, SoftLabelMap, VOTE_TIE_TOL};
use crate::inference::PredictiveMap;
use crate::math;
use crate::ontology::{Level, Ontology};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    EmptyMask,
    ShapeMismatch { expected: usize, got: usize },
    LevelBelowTrained { trained: Level, requested: Level },
    NoValidPixels,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyMask => f.write_str("mask selects no pixels"),
            MetricsError::ShapeMismatch { expected, got } => {
                write!(f, "buffer length {got}, expected {expected}")
            }
            MetricsError::LevelBelowTrained { trained, requested } => write!(
                f,
                "cannot evaluate at {requested}: below the trained level {trained}"
            ),
            MetricsError::NoValidPixels => f.write_str("no unambiguous foreground pixels"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// L1 normalization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Normalization {
    /// 1/(2·|mask|): total variation per pixel, spans [0,1].
    PerPixel,
    /// 1/(2·|mask|·C): per pixel and class, capped at 1/ (C/2) for
    /// distributions; kept for fidelity with the printed form.
    PerPixelPerClass,
}

fn check_pair(p: &[f64], y: &[f64], mask: &[bool], c: usize) -> Result<usize, MetricsError> {
    if p.len() != y.len() {
        return Err(MetricsError::ShapeMismatch {
            expected: p.len(),
            got: y.len(),
        });
    }
    if p.len() != mask.len() * c {
        return Err(MetricsError::ShapeMismatch {
            expected: mask.len() * c,
            got: p.len(),
        });
    }
    let counted = mask.iter().filter(|&&m| m).count();
    if counted == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(counted)
}

/// Class-averaged Dice semimetric between distributions:
/// per class `(‖p‖₁ + ‖y‖₁ − ‖p−y‖₁ + ε) / (‖p‖₁ + ‖y‖₁ + ε)`.
///
/// Classes absent from both sides score 1 through the ε/ε limit.
pub fn macro_softdice(
    p: &[f64],
    y: &[f64],
    mask: &[bool],
    c: usize,
    epsilon: f64,
) -> Result<f64, MetricsError> {
    check_pair(p, y, mask, c)?;
    let mut p_mass = vec![0.0; c];
    let mut y_mass = vec![0.0; c];
    let mut diff = vec![0.0; c];
    for (idx, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let pr = &p[idx * c..(idx + 1) * c];
        let yr = &y[idx * c..(idx + 1) * c];
        for ch in 0..c {
            p_mass[ch] += pr[ch].abs();
            y_mass[ch] += yr[ch].abs();
            diff[ch] += (pr[ch] - yr[ch]).abs();
        }
    }
    let mut total = 0.0;
    for ch in 0..c {
        total += (p_mass[ch] + y_mass[ch] - diff[ch] + epsilon) / (p_mass[ch] + y_mass[ch] + epsilon);
    }
    Ok(total / c as f64)
}

/// Normalized L1 distance between distributions; 0 iff identical on the
/// mask, and 1 for disjoint one-hots under per-pixel normalization.
pub fn l1_metric(
    p: &[f64],
    y: &[f64],
    mask: &[bool],
    c: usize,
    normalization: L1Normalization,
) -> Result<f64, MetricsError> {
    let counted = check_pair(p, y, mask, c)?;
    let mut sum = 0.0;
    for (idx, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..c {
            sum += (p[idx * c + ch] - y[idx * c + ch]).abs();
        }
    }
    let denom = match normalization {
        L1Normalization::PerPixel => 2.0 * counted as f64,
        L1Normalization::PerPixelPerClass => 2.0 * counted as f64 * c as f64,
    };
    Ok(sum / denom)
}

fn check_labels(pred: &[u32], labels: &[u32], valid: &[bool]) -> Result<usize, MetricsError> {
    if pred.len() != labels.len() || pred.len() != valid.len() {
        return Err(MetricsError::ShapeMismatch {
            expected: pred.len(),
            got: labels.len().min(valid.len()),
        });
    }
    let counted = valid.iter().filter(|&&v| v).count();
    if counted == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(counted)
}

/// Micro Dice over valid pixels: `Σ_c 2·TP_c / Σ_c (|pred_c| + |gt_c|)`.
///
/// For exclusive labels this equals pixel accuracy exactly.
pub fn dice_micro(pred: &[u32], labels: &[u32], valid: &[bool]) -> Result<f64, MetricsError> {
    let counted = check_labels(pred, labels, valid)?;
    let mut correct = 0usize;
    for idx in 0..pred.len() {
        if valid[idx] && pred[idx] == labels[idx] {
            correct += 1;
        }
    }
    // 2·Σ TP / (2·|valid|) — each pixel contributes once to pred counts and
    // once to gt counts.
    Ok(correct as f64 / counted as f64)
}

/// Mean per-class Dice over valid pixels.
///
/// With `include_absent = false` (default), classes with no support on
/// either side are excluded from the mean; otherwise they score 1 via ε.
pub fn dice_macro(
    pred: &[u32],
    labels: &[u32],
    valid: &[bool],
    classes: usize,
    include_absent: bool,
    epsilon: f64,
) -> Result<f64, MetricsError> {
    check_labels(pred, labels, valid)?;
    let mut tp = vec![0u64; classes];
    let mut pred_count = vec![0u64; classes];
    let mut gt_count = vec![0u64; classes];
    for idx in 0..pred.len() {
        if !valid[idx] {
            continue;
        }
        let p = pred[idx] as usize;
        let g = labels[idx] as usize;
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for ch in 0..classes {
        let support = pred_count[ch] + gt_count[ch];
        if support == 0 && !include_absent {
            continue;
        }
        total += (2.0 * tp[ch] as f64 + epsilon) / (support as f64 + epsilon);
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(total / counted as f64)
}

/// Row-normalized confusion matrix in percent; empty rows stay zero.
pub fn confusion_matrix(
    pred: &[u32],
    labels: &[u32],
    valid: &[bool],
    classes: usize,
) -> Result<Vec<f64>, MetricsError> {
    check_labels(pred, labels, valid)?;
    let mut counts = vec![0u64; classes * classes];
    for idx in 0..pred.len() {
        if valid[idx] {
            counts[labels[idx] as usize * classes + pred[idx] as usize] += 1;
        }
    }
    let mut out = vec![0.0; classes * classes];
    for row in 0..classes {
        let total: u64 = counts[row * classes..(row + 1) * classes].iter().sum();
        if total > 0 {
            for col in 0..classes {
                out[row * classes + col] =
                    100.0 * counts[row * classes + col] as f64 / total as f64;
            }
        }
    }
    Ok(out)
}

/// Per-class mass and pixel shares, the data behind class-balance plots.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMass {
    pub class_id: u32,
    /// Share of predicted probability mass on masked pixels.
    pub predicted_mass_share: f64,
    /// Share of target probability mass on masked pixels.
    pub target_mass_share: f64,
    /// Share of masked pixels whose predicted argmax is this class.
    pub argmax_share: f64,
    /// Share of valid pixels whose majority label is this class.
    pub majority_share: f64,
}

/// Summarizes predicted vs. target mass and argmax vs. majority shares.
pub fn class_mass_summary(
    p: &[f64],
    y: &[f64],
    mask: &[bool],
    valid: &[bool],
    majority: &[u32],
    c: usize,
) -> Result<Vec<ClassMass>, MetricsError> {
    let counted = check_pair(p, y, mask, c)?;
    let mut pred_mass = vec![0.0; c];
    let mut target_mass = vec![0.0; c];
    let mut argmax_count = vec![0u64; c];
    let mut majority_count = vec![0u64; c];
    let mut valid_count = 0u64;
    for idx in 0..mask.len() {
        if mask[idx] {
            let row = &p[idx * c..(idx + 1) * c];
            let mut best = 0usize;
            for ch in 0..c {
                pred_mass[ch] += row[ch];
                target_mass[ch] += y[idx * c + ch];
                if row[ch] > row[best] {
                    best = ch;
                }
            }
            argmax_count[best] += 1;
        }
        if valid[idx] {
            majority_count[majority[idx] as usize] += 1;
            valid_count += 1;
        }
    }
    let total_pred: f64 = pred_mass.iter().sum();
    let total_target: f64 = target_mass.iter().sum();
    Ok((0..c)
        .map(|ch| ClassMass {
            class_id: ch as u32,
            predicted_mass_share: if total_pred > 0.0 { pred_mass[ch] / total_pred } else { 0.0 },
            target_mass_share: if total_target > 0.0 {
                target_mass[ch] / total_target
            } else {
                0.0
            },
            argmax_share: argmax_count[ch] as f64 / counted as f64,
            majority_share: if valid_count > 0 {
                majority_count[ch] as f64 / valid_count as f64
            } else {
                0.0
            },
        })
        .collect())
}

/// All metric values for one evaluation run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub eval_level: Level,
    pub trained_level: Level,
    pub classes: usize,
    pub macro_soft_dice: f64,
    pub l1: f64,
    pub l1_printed_form: f64,
    pub dice: f64,
    pub macro_dice: f64,
    /// Row-normalized percentages, C×C.
    pub confusion: Vec<f64>,
    pub class_mass: Vec<ClassMass>,
    pub foreground_pixels: usize,
    pub valid_pixels: usize,
}

/// Evaluates a prediction against soft labels at `eval_level`.
///
/// Both maps are remapped up as needed; majority labels and ambiguity are
/// recomputed at the evaluation level. Soft metrics use the foreground
/// mask, hard metrics the foreground ∧ unambiguous mask.
pub fn evaluate(
    pred: &PredictiveMap,
    soft: &SoftLabelMap,
    ontology: &Ontology,
    eval_level: Level,
) -> Result<RunMetrics, MetricsError> {
    if eval_level.depth() > pred.level.depth() {
        return Err(MetricsError::LevelBelowTrained {
            trained: pred.level,
            requested: eval_level,
        });
    }
    if eval_level.depth() > soft.level.depth() {
        return Err(MetricsError::LevelBelowTrained {
            trained: soft.level,
            requested: eval_level,
        });
    }
    if pred.height != soft.height || pred.width != soft.width {
        return Err(MetricsError::ShapeMismatch {
            expected: soft.height * soft.width,
            got: pred.height * pred.width,
        });
    }

    let trained_level = pred.level;
    let classes = ontology.class_count(eval_level);
    let p = if pred.level == eval_level {
        pred.probs.clone()
    } else {
        ontology
            .remap_up(&pred.probs, pred.level, eval_level)
            .map_err(|_| MetricsError::LevelBelowTrained {
                trained: pred.level,
                requested: eval_level,
            })?
    };
    let soft_at_level = if soft.level == eval_level {
        soft.clone()
    } else {
        soft.remap_up(ontology, eval_level)
            .map_err(|_| MetricsError::LevelBelowTrained {
                trained: soft.level,
                requested: eval_level,
            })?
    };

    let pixels = soft_at_level.pixels();
    let foreground = &soft_at_level.foreground;

    // Majority labels at the evaluation level.
    let mut majority = vec![0u32; pixels];
    let mut valid = vec![false; pixels];
    for idx in 0..pixels {
        if !foreground[idx] {
            continue;
        }
        if let Some(best) = strict_argmax(soft_at_level.pixel(idx), VOTE_TIE_TOL) {
            majority[idx] = best as u32;
            valid[idx] = true;
        }
    }

    // Argmax predictions (ties break toward the lower id).
    let mut pred_labels = vec![0u32; pixels];
    for idx in 0..pixels {
        let row = &p[idx * classes..(idx + 1) * classes];
        let mut best = 0usize;
        for ch in 1..classes {
            if row[ch] > row[best] {
                best = ch;
            }
        }
        pred_labels[idx] = best as u32;
    }

    let macro_soft_dice = macro_softdice(
        &p,
        &soft_at_level.probs,
        foreground,
        classes,
        crate::objectives::DICE_EPSILON,
    )?;
    let l1 = l1_metric(&p, &soft_at_level.probs, foreground, classes, L1Normalization::PerPixel)?;
    let l1_printed_form = l1_metric(
        &p,
        &soft_at_level.probs,
        foreground,
        classes,
        L1Normalization::PerPixelPerClass,
    )?;
    let dice = dice_micro(&pred_labels, &majority, &valid)?;
    let macro_dice = dice_macro(
        &pred_labels,
        &majority,
        &valid,
        classes,
        false,
        crate::objectives::DICE_EPSILON,
    )?;
    let confusion = confusion_matrix(&pred_labels, &majority, &valid, classes)?;
    let class_mass = class_mass_summary(
        &p,
        &soft_at_level.probs,
        foreground,
        &valid,
        &majority,
        classes,
    )?;

    Ok(RunMetrics {
        eval_level,
        trained_level,
        classes,
        macro_soft_dice,
        l1,
        l1_printed_form,
        dice,
        macro_dice,
        confusion,
        class_mass,
        foreground_pixels: foreground.iter().filter(|&&f| f).count(),
        valid_pixels: valid.iter().filter(|&&v| v).count(),
    })
}

/// Mean and population standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: math::sqrt(var),
    }
}

/// Metrics aggregated over seeds: mean/std per metric, averaged confusion
/// and class-mass tables.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub eval_level: Level,
    pub trained_level: Level,
    pub classes: usize,
    pub runs: usize,
    pub macro_soft_dice: MeanStd,
    pub l1: MeanStd,
    pub l1_printed_form: MeanStd,
    pub dice: MeanStd,
    pub macro_dice: MeanStd,
    pub confusion: Vec<f64>,
    pub class_mass: Vec<ClassMass>,
}

impl MetricsReport {
    /// Aggregates per-seed runs; all runs must share levels and classes.
    pub fn aggregate(runs: &[RunMetrics]) -> Option<MetricsReport> {
        let first = runs.first()?;
        let collect = |f: fn(&RunMetrics) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
        let n = runs.len() as f64;
        let mut confusion = vec![0.0; first.confusion.len()];
        for run in runs {
            for (slot, v) in confusion.iter_mut().zip(run.confusion.iter()) {
                *slot += v / n;
            }
        }
        let mut class_mass = Vec::with_capacity(first.class_mass.len());
        for ch in 0..first.class_mass.len() {
            let avg = |f: fn(&ClassMass) -> f64| -> f64 {
                runs.iter().map(|r| f(&r.class_mass[ch])).sum::<f64>() / n
            };
            class_mass.push(ClassMass {
                class_id: first.class_mass[ch].class_id,
                predicted_mass_share: avg(|c| c.predicted_mass_share),
                target_mass_share: avg(|c| c.target_mass_share),
                argmax_share: avg(|c| c.argmax_share),
                majority_share: avg(|c| c.majority_share),
            });
        }
        Some(MetricsReport {
            eval_level: first.eval_level,
            trained_level: first.trained_level,
            classes: first.classes,
            runs: runs.len(),
            macro_soft_dice: mean_std(&collect(|r| r.macro_soft_dice)),
            l1: mean_std(&collect(|r| r.l1)),
            l1_printed_form: mean_std(&collect(|r| r.l1_printed_form)),
            dice: mean_std(&collect(|r| r.dice)),
            macro_dice: mean_std(&collect(|r| r.macro_dice)),
            confusion,
            class_mass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_score_perfectly() {
        let p = alloc::vec![0.3, 0.5, 0.2, 0.6, 0.1, 0.3];
        let mask = alloc::vec![true, true];
        let sd = macro_softdice(&p, &p, &mask, 3, 1e-6).unwrap();
        assert!((sd - 1.0).abs() < 1e-9);
        assert_eq!(l1_metric(&p, &p, &mask, 3, L1Normalization::PerPixel).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_one_hots_bottom_out() {
        let p = alloc::vec![1.0, 0.0, 0.0, 1.0];
        let y = alloc::vec![0.0, 1.0, 1.0, 0.0];
        let mask = alloc::vec![true, true];
        let sd = macro_softdice(&p, &y, &mask, 2, 1e-6).unwrap();
        assert!(sd < 1e-5, "sd {sd}");
        let l1 = l1_metric(&p, &y, &mask, 2, L1Normalization::PerPixel).unwrap();
        assert!((l1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_hand_values_for_half_half() {
        // 1 pixel, C=2, p=(.5,.5), y=(1,0).
        let p = alloc::vec![0.5, 0.5];
        let y = alloc::vec![1.0, 0.0];
        let mask = alloc::vec![true];
        assert!(
            (l1_metric(&p, &y, &mask, 2, L1Normalization::PerPixel).unwrap() - 0.5).abs() < 1e-12
        );
        assert!(
            (l1_metric(&p, &y, &mask, 2, L1Normalization::PerPixelPerClass).unwrap() - 0.25).abs()
                < 1e-12
        );
    }

    #[test]
    fn absent_class_scores_one_via_epsilon() {
        // Class 2 appears in neither distribution.
        let p = alloc::vec![1.0, 0.0, 0.0];
        let y = alloc::vec![1.0, 0.0, 0.0];
        let mask = alloc::vec![true];
        let sd = macro_softdice(&p, &y, &mask, 3, 1e-6).unwrap();
        assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_micro_equals_accuracy() {
        let pred = alloc::vec![0u32, 1, 2, 1, 0, 2, 1, 1];
        let labels = alloc::vec![0u32, 1, 1, 1, 2, 2, 0, 1];
        let valid = alloc::vec![true, true, true, true, true, false, true, true];
        let dice = dice_micro(&pred, &labels, &valid).unwrap();
        // Accuracy over the 7 valid pixels, counted by hand.
        let accuracy = 4.0 / 7.0;
        assert_eq!(dice, accuracy);
    }

    #[test]
    fn dice_micro_extremes() {
        let valid = alloc::vec![true; 4];
        assert_eq!(dice_micro(&[1, 1, 1, 1], &[1, 1, 1, 1], &valid).unwrap(), 1.0);
        assert_eq!(dice_micro(&[0, 0, 0, 0], &[1, 1, 1, 1], &valid).unwrap(), 0.0);
    }

    #[test]
    fn dice_macro_counts_only_supported_classes() {
        // Class 1 perfect, class 2 fully missed (predicted as 1), class 0 absent.
        let pred = alloc::vec![1u32, 1, 1, 1];
        let labels = alloc::vec![1u32, 1, 2, 2];
        let valid = alloc::vec![true; 4];
        let macro_dice = dice_macro(&pred, &labels, &valid, 3, false, 1e-6).unwrap();
        // class1: 2·2/(4+2) = 2/3; class2: 0/(0+2) ≈ 0.
        assert!((macro_dice - (2.0 / 3.0 + 0.0) / 2.0).abs() < 1e-6);
        let with_absent = dice_macro(&pred, &labels, &valid, 3, true, 1e-6).unwrap();
        assert!(with_absent > macro_dice);
    }

    #[test]
    fn confusion_rows_normalize_to_percent() {
        let pred = alloc::vec![0u32, 1, 1, 0];
        let labels = alloc::vec![0u32, 0, 1, 1];
        let valid = alloc::vec![true; 4];
        let m = confusion_matrix(&pred, &labels, &valid, 2).unwrap();
        assert_eq!(m, alloc::vec![50.0, 50.0, 50.0, 50.0]);
    }

    #[test]
    fn mean_std_degenerates_to_zero_for_one_run() {
        let ms = mean_std(&[0.7]);
        assert_eq!(ms.mean, 0.7);
        assert_eq!(ms.std, 0.0);
    }
}
