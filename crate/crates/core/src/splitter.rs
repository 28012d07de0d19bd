//! Train/val/test assignment minimizing the L1 distance between the
//! splits' class pixel distributions.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitterError {
    TooFewImages { got: usize },
    FractionsDontSumToOne { sum: f64 },
    EmptyClassCounts,
    RaggedCounts { expected: usize, got: usize },
}

impl fmt::Display for SplitterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitterError::TooFewImages { got } => {
                write!(f, "need at least 3 images to split, got {got}")
            }
            SplitterError::FractionsDontSumToOne { sum } => {
                write!(f, "split fractions sum to {sum}, expected 1")
            }
            SplitterError::EmptyClassCounts => f.write_str("class count vectors are empty"),
            SplitterError::RaggedCounts { expected, got } => {
                write!(f, "class count vector has {got} entries, expected {expected}")
            }
        }
    }
}

impl core::error::Error for SplitterError {}

/// Result of [`optimize_split`].
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub assignment: Vec<Split>,
    pub objective: f64,
    /// (iteration, objective) after each accepted swap, starting with the
    /// initial objective at iteration 0.
    pub log: Vec<(u64, f64)>,
    pub seed: u64,
}

/// Split sizes: floor(N·f) with the remainder distributed by the largest
/// fractional parts (ties resolved in train, val, test order).
fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        let exact = n as f64 * fractions[i];
        sizes[i] = exact as usize;
        remainders[i] = exact - sizes[i] as f64;
        assigned += sizes[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    let mut left = n - assigned;
    for &i in &order {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Pairwise objective: `Σ_{s<t} ½·Σ_c |d_s(c) − d_t(c)|` where d_s is the
/// class-normalized pixel distribution of split s.
pub fn split_objective(counts: &[Vec<f64>], assignment: &[Split], classes: usize) -> f64 {
    let mut totals = vec![0.0f64; 3 * classes];
    for (img, split) in assignment.iter().enumerate() {
        let base = split.index() * classes;
        for c in 0..classes {
            totals[base + c] += counts[img][c];
        }
    }
    objective_from_totals(&totals, classes)
}

fn objective_from_totals(totals: &[f64], classes: usize) -> f64 {
    let mut dists = vec![0.0f64; 3 * classes];
    for s in 0..3 {
        let sum: f64 = totals[s * classes..(s + 1) * classes].iter().sum();
        if sum > 0.0 {
            for c in 0..classes {
                dists[s * classes + c] = totals[s * classes + c] / sum;
            }
        }
    }
    let mut objective = 0.0;
    for s in 0..3 {
        for t in (s + 1)..3 {
            let mut l1 = 0.0;
            for c in 0..classes {
                l1 += (dists[s * classes + c] - dists[t * classes + c]).abs();
            }
            objective += 0.5 * l1;
        }
    }
    objective
}

/// Hill-climbing over cross-split image swaps.
///
/// Starts from a seeded size-respecting random assignment, then samples a
/// split pair and one image from each uniformly per iteration, accepting
/// the swap only on a strict objective decrease. Deterministic under the
/// seed; the objective never increases.
pub fn optimize_split(
    counts: &[Vec<f64>],
    fractions: [f64; 3],
    iterations: u64,
    seed: u64,
) -> Result<SplitAssignment, SplitterError> {
    let n = counts.len();
    if n < 3 {
        return Err(SplitterError::TooFewImages { got: n });
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SplitterError::FractionsDontSumToOne { sum });
    }
    let classes = counts[0].len();
    if classes == 0 {
        return Err(SplitterError::EmptyClassCounts);
    }
    for row in counts {
        if row.len() != classes {
            return Err(SplitterError::RaggedCounts {
                expected: classes,
                got: row.len(),
            });
        }
    }

    let sizes = split_sizes(n, fractions);
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut assignment = vec![Split::Train; n];
    let mut members: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    {
        let mut cursor = 0usize;
        for (s, &size) in sizes.iter().enumerate() {
            for _ in 0..size {
                let img = order[cursor];
                assignment[img] = Split::ALL[s];
                members[s].push(img);
                cursor += 1;
            }
        }
    }

    let mut totals = vec![0.0f64; 3 * classes];
    for (img, split) in assignment.iter().enumerate() {
        for c in 0..classes {
            totals[split.index() * classes + c] += counts[img][c];
        }
    }
    let mut objective = objective_from_totals(&totals, classes);
    let mut log = vec![(0u64, objective)];

    const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    for iter in 1..=iterations {
        let (a, b) = PAIRS[rng.random_range(0..3)];
        if members[a].is_empty() || members[b].is_empty() {
            continue;
        }
        let ia = rng.random_range(0..members[a].len());
        let ib = rng.random_range(0..members[b].len());
        let img_a = members[a][ia];
        let img_b = members[b][ib];

        for c in 0..classes {
            totals[a * classes + c] += counts[img_b][c] - counts[img_a][c];
            totals[b * classes + c] += counts[img_a][c] - counts[img_b][c];
        }
        let candidate = objective_from_totals(&totals, classes);
        if candidate < objective {
            objective = candidate;
            members[a][ia] = img_b;
            members[b][ib] = img_a;
            assignment[img_a] = Split::ALL[b];
            assignment[img_b] = Split::ALL[a];
            log.push((iter, objective));
        } else {
            // Revert.
            for c in 0..classes {
                totals[a * classes + c] += counts[img_a][c] - counts[img_b][c];
                totals[b * classes + c] += counts[img_b][c] - counts[img_a][c];
            }
        }
    }

    Ok(SplitAssignment {
        assignment,
        objective,
        log,
        seed,
    })
}
