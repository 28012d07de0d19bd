//! Loss functions over masked per-pixel distributions, with analytic
//! gradients with respect to logits.
//!
//! All losses share the layout `[n][c][p]` for logits and soft targets
//! (N images, C classes, P flattened pixels) and a count mask `[n][p]`.
//! Soft losses count foreground pixels; hard losses additionally require
//! an unambiguous majority — the caller encodes both into the mask.
//! Reductions accumulate in f64, so values are reproducible across pixel
//! partitionings.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::math;
use crate::ontology::{Level, Ontology};

/// Dice smoothing constant.
pub const DICE_EPSILON: f64 = 1e-6;
/// Additive clamp inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Loss identifiers as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossId {
    SoftDice,
    TreeSoftDice,
    TreeCrossEntropy,
    CrossEntropySoft,
    CrossEntropyHard,
    DiceHard,
}

impl LossId {
    pub const ALL: [LossId; 6] = [
        LossId::SoftDice,
        LossId::TreeSoftDice,
        LossId::TreeCrossEntropy,
        LossId::CrossEntropySoft,
        LossId::CrossEntropyHard,
        LossId::DiceHard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossId::SoftDice => "softdice",
            LossId::TreeSoftDice => "tree:softdice",
            LossId::TreeCrossEntropy => "tree:ce",
            LossId::CrossEntropySoft => "ce-soft",
            LossId::CrossEntropyHard => "ce-hard",
            LossId::DiceHard => "dice-hard",
        }
    }

    /// Whether the loss consumes soft (distributional) targets.
    pub fn uses_soft_targets(self) -> bool {
        !matches!(self, LossId::CrossEntropyHard | LossId::DiceHard)
    }

    /// Whether the loss needs an ontology for upward remapping.
    pub fn is_tree(self) -> bool {
        matches!(self, LossId::TreeSoftDice | LossId::TreeCrossEntropy)
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softdice" => Ok(LossId::SoftDice),
            "tree:softdice" => Ok(LossId::TreeSoftDice),
            "tree:ce" => Ok(LossId::TreeCrossEntropy),
            "ce-soft" => Ok(LossId::CrossEntropySoft),
            "ce-hard" => Ok(LossId::CrossEntropyHard),
            "dice-hard" => Ok(LossId::DiceHard),
            other => Err(alloc::format!(
                "unknown loss '{other}' (expected softdice | tree:softdice | tree:ce | ce-soft | ce-hard | dice-hard)"
            )),
        }
    }
}

/// Scalar loss value and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossValueGrad {
    pub value: f64,
    /// Same layout as the logits; zero outside the count mask.
    pub grad_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    EmptyMask,
    ShapeMismatch { expected: usize, got: usize },
    InvalidLambda(f64),
    LevelNotBelowPatterns(Level),
    ClassCountMismatch { expected: usize, got: usize },
    LabelOutOfRange { label: u32, classes: usize },
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::EmptyMask => f.write_str("count mask selects no pixels"),
            ObjectiveError::ShapeMismatch { expected, got } => {
                write!(f, "buffer length {got}, expected {expected}")
            }
            ObjectiveError::InvalidLambda(l) => write!(f, "lambda {l} outside [0,1]"),
            ObjectiveError::LevelNotBelowPatterns(level) => {
                write!(f, "tree loss needs a level below patterns, got {level}")
            }
            ObjectiveError::ClassCountMismatch { expected, got } => {
                write!(f, "got {got} classes, ontology level has {expected}")
            }
            ObjectiveError::LabelOutOfRange { label, classes } => {
                write!(f, "hard label {label} out of range for {classes} classes")
            }
        }
    }
}

impl core::error::Error for ObjectiveError {}

fn check_shapes(
    logits: &[f64],
    targets_len: Option<usize>,
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
) -> Result<usize, ObjectiveError> {
    let expected = n * c * p;
    if logits.len() != expected {
        return Err(ObjectiveError::ShapeMismatch {
            expected,
            got: logits.len(),
        });
    }
    if let Some(len) = targets_len {
        if len != expected {
            return Err(ObjectiveError::ShapeMismatch { expected, got: len });
        }
    }
    if mask.len() != n * p {
        return Err(ObjectiveError::ShapeMismatch {
            expected: n * p,
            got: mask.len(),
        });
    }
    let counted = mask.iter().filter(|&&m| m).count();
    if counted == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    Ok(counted)
}

/// Softmax over the class axis for each (image, pixel) column.
pub fn softmax(logits: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for i in 0..n {
        for j in 0..p {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(logits[(i * c + ch) * p + j]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                let e = math::exp(logits[(i * c + ch) * p + j] - max);
                probs[(i * c + ch) * p + j] = e;
                denom += e;
            }
            for ch in 0..c {
                probs[(i * c + ch) * p + j] /= denom;
            }
        }
    }
    probs
}

/// Pulls a gradient w.r.t. probabilities back through the softmax,
/// zeroing unmasked pixels.
fn chain_softmax(
    grad_probs: &[f64],
    probs: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
) -> Vec<f64> {
    let mut grad = vec![0.0; grad_probs.len()];
    for i in 0..n {
        for j in 0..p {
            if !mask[i * p + j] {
                continue;
            }
            let mut dot = 0.0;
            for ch in 0..c {
                let idx = (i * c + ch) * p + j;
                dot += grad_probs[idx] * probs[idx];
            }
            for ch in 0..c {
                let idx = (i * c + ch) * p + j;
                grad[idx] = probs[idx] * (grad_probs[idx] - dot);
            }
        }
    }
    grad
}

/// Value and gradient w.r.t. probabilities of the distributional Dice loss:
/// `1 − (1/C)·Σ_c (2·Σ p·y + ε)/(Σ (p+y) + ε)` with batch-pooled sums.
fn soft_dice_parts(
    probs: &[f64],
    targets: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
    epsilon: f64,
) -> (f64, Vec<f64>) {
    let mut numerators = vec![epsilon; c];
    let mut denominators = vec![epsilon; c];
    for i in 0..n {
        for j in 0..p {
            if !mask[i * p + j] {
                continue;
            }
            for ch in 0..c {
                let idx = (i * c + ch) * p + j;
                numerators[ch] += 2.0 * probs[idx] * targets[idx];
                denominators[ch] += probs[idx] + targets[idx];
            }
        }
    }
    let mut value = 1.0;
    for ch in 0..c {
        value -= numerators[ch] / denominators[ch] / c as f64;
    }

    let mut grad = vec![0.0; probs.len()];
    let scale = -1.0 / c as f64;
    for i in 0..n {
        for j in 0..p {
            if !mask[i * p + j] {
                continue;
            }
            for ch in 0..c {
                let idx = (i * c + ch) * p + j;
                let d = denominators[ch];
                grad[idx] = scale * (2.0 * targets[idx] * d - numerators[ch]) / (d * d);
            }
        }
    }
    (value, grad)
}

/// Value and gradient w.r.t. probabilities of the masked soft
/// cross-entropy `−(1/|mask|)·Σ Σ_c y·ln(p + clamp)`.
fn cross_entropy_parts(
    probs: &[f64],
    targets: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
    counted: usize,
) -> (f64, Vec<f64>) {
    let inv = 1.0 / counted as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for i in 0..n {
        for j in 0..p {
            if !mask[i * p + j] {
                continue;
            }
            for ch in 0..c {
                let idx = (i * c + ch) * p + j;
                if targets[idx] != 0.0 {
                    value -= targets[idx] * math::ln(probs[idx] + LOG_CLAMP) * inv;
                    grad[idx] = -targets[idx] / (probs[idx] + LOG_CLAMP) * inv;
                }
            }
        }
    }
    (value, grad)
}

/// Distributional Dice loss over soft targets.
pub fn soft_dice_loss(
    logits: &[f64],
    targets: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
    epsilon: f64,
) -> Result<LossValueGrad, ObjectiveError> {
    check_shapes(logits, Some(targets.len()), mask, n, c, p)?;
    let probs = softmax(logits, n, c, p);
    let (value, grad_probs) = soft_dice_parts(&probs, targets, mask, n, c, p, epsilon);
    Ok(LossValueGrad {
        value,
        grad_logits: chain_softmax(&grad_probs, &probs, mask, n, c, p),
    })
}

/// Soft-target cross-entropy; its logit gradient is `(p − y)/|mask|`.
pub fn cross_entropy_soft(
    logits: &[f64],
    targets: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
) -> Result<LossValueGrad, ObjectiveError> {
    let counted = check_shapes(logits, Some(targets.len()), mask, n, c, p)?;
    let probs = softmax(logits, n, c, p);
    let (value, grad_probs) = cross_entropy_parts(&probs, targets, mask, n, c, p, counted);
    Ok(LossValueGrad {
        value,
        grad_logits: chain_softmax(&grad_probs, &probs, mask, n, c, p),
    })
}

fn one_hot_targets(
    labels: &[u32],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
) -> Result<Vec<f64>, ObjectiveError> {
    if labels.len() != n * p {
        return Err(ObjectiveError::ShapeMismatch {
            expected: n * p,
            got: labels.len(),
        });
    }
    let mut targets = vec![0.0; n * c * p];
    for i in 0..n {
        for j in 0..p {
            if !mask[i * p + j] {
                continue;
            }
            let label = labels[i * p + j] as usize;
            if label >= c {
                return Err(ObjectiveError::LabelOutOfRange {
                    label: label as u32,
                    classes: c,
                });
            }
            targets[(i * c + label) * p + j] = 1.0;
        }
    }
    Ok(targets)
}

/// Cross-entropy on majority-voted labels (one-hot specialization).
pub fn cross_entropy_hard(
    logits: &[f64],
    labels: &[u32],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
) -> Result<LossValueGrad, ObjectiveError> {
    check_shapes(logits, None, mask, n, c, p)?;
    let targets = one_hot_targets(labels, mask, n, c, p)?;
    cross_entropy_soft(logits, &targets, mask, n, c, p)
}

/// Class-averaged Dice loss on majority-voted labels.
pub fn dice_loss_hard(
    logits: &[f64],
    labels: &[u32],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
    epsilon: f64,
) -> Result<LossValueGrad, ObjectiveError> {
    check_shapes(logits, None, mask, n, c, p)?;
    let targets = one_hot_targets(labels, mask, n, c, p)?;
    soft_dice_loss(logits, &targets, mask, n, c, p, epsilon)
}

/// Soft base losses a tree loss can wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeBase {
    SoftDice,
    CrossEntropy,
}

/// Convex combination of a base loss at the training level and the same
/// loss after remapping both distributions up to the pattern level:
/// `λ·L(p, y) + (1−λ)·L(p_map, y_map)`.
///
/// From the explanation level the remap is a single parent step; from the
/// sub-explanation level it is applied twice, through explanations to
/// patterns.
pub fn tree_loss(
    base: TreeBase,
    lambda: f64,
    logits: &[f64],
    targets: &[f64],
    mask: &[bool],
    n: usize,
    c: usize,
    p: usize,
    ontology: &Ontology,
    level: Level,
    epsilon: f64,
) -> Result<LossValueGrad, ObjectiveError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ObjectiveError::InvalidLambda(lambda));
    }
    if level == Level::Pattern {
        return Err(ObjectiveError::LevelNotBelowPatterns(level));
    }
    if ontology.class_count(level) != c {
        return Err(ObjectiveError::ClassCountMismatch {
            expected: ontology.class_count(level),
            got: c,
        });
    }
    let counted = check_shapes(logits, Some(targets.len()), mask, n, c, p)?;
    let probs = softmax(logits, n, c, p);

    let (direct_value, direct_grad) = match base {
        TreeBase::SoftDice => soft_dice_parts(&probs, targets, mask, n, c, p, epsilon),
        TreeBase::CrossEntropy => cross_entropy_parts(&probs, targets, mask, n, c, p, counted),
    };

    // Remap to patterns; the table composes parent steps as needed.
    let table = ontology
        .remap_table(level, Level::Pattern)
        .map_err(|_| ObjectiveError::LevelNotBelowPatterns(level))?;
    let c_map = ontology.class_count(Level::Pattern);
    let mut probs_map = vec![0.0; n * c_map * p];
    let mut targets_map = vec![0.0; n * c_map * p];
    for i in 0..n {
        for ch in 0..c {
            let parent = table[ch] as usize;
            for j in 0..p {
                probs_map[(i * c_map + parent) * p + j] += probs[(i * c + ch) * p + j];
                targets_map[(i * c_map + parent) * p + j] += targets[(i * c + ch) * p + j];
            }
        }
    }

    let (mapped_value, mapped_grad) = match base {
        TreeBase::SoftDice => soft_dice_parts(&probs_map, &targets_map, mask, n, c_map, p, epsilon),
        TreeBase::CrossEntropy => {
            cross_entropy_parts(&probs_map, &targets_map, mask, n, c_map, p, counted)
        }
    };

    // d(mapped)/d(p_i) = d(mapped)/d(p_map_{φ(i)}), then one softmax chain.
    let mut grad_probs = vec![0.0; probs.len()];
    for i in 0..n {
        for ch in 0..c {
            let parent = table[ch] as usize;
            for j in 0..p {
                grad_probs[(i * c + ch) * p + j] = lambda * direct_grad[(i * c + ch) * p + j]
                    + (1.0 - lambda) * mapped_grad[(i * c_map + parent) * p + j];
            }
        }
    }

    Ok(LossValueGrad {
        value: lambda * direct_value + (1.0 - lambda) * mapped_value,
        grad_logits: chain_softmax(&grad_probs, &probs, mask, n, c, p),
    })
}
