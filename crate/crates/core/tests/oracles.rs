//! Independent scalar oracles for the numerically loaded operations.
//!
//! Every oracle here is written as a plain re-derivation — exhaustive
//! searches, naive per-pixel loops, hand-rolled EM — and deliberately does
//! not share code paths with the implementation it checks.

use rand::Rng;
use softseg_core::agreement::{self, KappaValue, PresenceTable, Scope};
use softseg_core::annotations::AnnotatorMask;
use softseg_core::fusion::{self, StapleParams};
use softseg_core::imaging::{self, RasterImage};
use softseg_core::inference::{self, SlidingWindowConfig, TilePredictor};
use softseg_core::metrics::{self, L1Normalization};
use softseg_core::objectives::{self, DICE_EPSILON};
use softseg_core::ontology::{Level, Ontology, OntologyNode};
use softseg_core::rng::{rng_for_index, rng_from_seed};
use softseg_core::splitter::{self, Split};

fn node(id: u32, level: Level, parent: Option<u32>) -> OntologyNode {
    OntologyNode {
        id,
        name: format!("{level}-{id}"),
        short_name: format!("{id}"),
        level,
        parent_id: parent,
        color: [10 * id as u8, 20, 30],
    }
}

/// patterns: benign+3; explanations: benign + (2, 3, 4) children;
/// sub-explanations: one child each.
fn deep_ontology() -> Ontology {
    let mut nodes = Vec::new();
    for id in 0..4 {
        nodes.push(node(id, Level::Pattern, None));
    }
    let parents = [0u32, 1, 1, 2, 2, 2, 3, 3, 3, 3];
    for (id, &p) in parents.iter().enumerate() {
        nodes.push(node(id as u32, Level::Explanation, Some(p)));
    }
    for id in 0..10 {
        nodes.push(node(id, Level::SubExplanation, Some(id)));
    }
    Ontology::new(nodes).unwrap()
}

fn random_simplex(rng: &mut impl Rng, classes: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0f64..1.0)).collect();
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
    row
}

#[test]
fn remap_matches_scalar_accumulation() {
    let ont = deep_ontology();
    let mut rng = rng_from_seed(100);
    let rows = 64;
    let c_in = 10;
    let mut dist = Vec::with_capacity(rows * c_in);
    for _ in 0..rows {
        dist.extend(random_simplex(&mut rng, c_in));
    }
    let out = ont.remap_up(&dist, Level::Explanation, Level::Pattern).unwrap();

    // Scalar oracle: loop classes, look the parent up per element.
    let parents = [0usize, 1, 1, 2, 2, 2, 3, 3, 3, 3];
    for row in 0..rows {
        let mut expected = [0.0f64; 4];
        for (i, &p) in parents.iter().enumerate() {
            expected[p] += dist[row * c_in + i];
        }
        for k in 0..4 {
            assert!((out[row * 4 + k] - expected[k]).abs() < 1e-15);
        }
        let in_sum: f64 = dist[row * c_in..(row + 1) * c_in].iter().sum();
        let out_sum: f64 = out[row * 4..(row + 1) * 4].iter().sum();
        assert!((in_sum - out_sum).abs() < 1e-12);
    }
}

#[test]
fn remap_composes_across_levels() {
    let ont = deep_ontology();
    let mut rng = rng_from_seed(101);
    let mut dist = Vec::new();
    for _ in 0..32 {
        dist.extend(random_simplex(&mut rng, 10));
    }
    let direct = ont.remap_up(&dist, Level::SubExplanation, Level::Pattern).unwrap();
    let via_expl = ont.remap_up(&dist, Level::SubExplanation, Level::Explanation).unwrap();
    let composed = ont.remap_up(&via_expl, Level::Explanation, Level::Pattern).unwrap();
    for (a, b) in direct.iter().zip(composed.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn otsu_matches_exhaustive_search_on_100_random_histograms() {
    let mut rng = rng_from_seed(200);
    for case in 0..100 {
        let mut hist = [0u64; 256];
        let bins = rng.random_range(1..40usize);
        for _ in 0..bins {
            let bin = rng.random_range(0..256usize);
            hist[bin] += rng.random_range(1..500u64);
        }
        let fast = imaging::otsu_threshold(&hist).unwrap();

        // Oracle: recompute the class statistics per threshold from
        // scratch and scan every t.
        let mut best: Option<(u8, f64)> = None;
        for t in 0..=255usize {
            let w0: f64 = hist[..=t].iter().map(|&c| c as f64).sum();
            let w1: f64 = hist[t + 1..].iter().map(|&c| c as f64).sum();
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let mu0: f64 = hist[..=t]
                .iter()
                .enumerate()
                .map(|(b, &c)| b as f64 * c as f64)
                .sum::<f64>()
                / w0;
            let mu1: f64 = hist[t + 1..]
                .iter()
                .enumerate()
                .map(|(b, &c)| (b + t + 1) as f64 * c as f64)
                .sum::<f64>()
                / w1;
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if best.map(|(_, v)| var > v).unwrap_or(true) {
                best = Some((t as u8, var));
            }
        }
        let expected = match best {
            Some((t, _)) => t,
            None => hist.iter().position(|&c| c > 0).unwrap() as u8,
        };
        assert_eq!(fast, expected, "case {case}");
    }
}

#[test]
fn morphology_matches_naive_gather_oracle() {
    let mut rng = rng_from_seed(300);
    let (h, w) = (21, 17);
    for case in 0..20 {
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.35)).collect();
        let radius = rng.random_range(1..4usize);

        // Gather oracle: a pixel dilates true if any in-image disk
        // neighbor is true; erodes true if all in-image neighbors are.
        let r = radius as i64;
        let gather = |src: &[bool], any: bool| -> Vec<bool> {
            let mut out = vec![false; h * w];
            for row in 0..h as i64 {
                for col in 0..w as i64 {
                    let mut acc = !any;
                    for dr in -r..=r {
                        for dc in -r..=r {
                            if dr * dr + dc * dc > r * r {
                                continue;
                            }
                            let (rr, cc) = (row + dr, col + dc);
                            if rr < 0 || rr >= h as i64 || cc < 0 || cc >= w as i64 {
                                continue;
                            }
                            let v = src[(rr * w as i64 + cc) as usize];
                            if any {
                                acc |= v;
                            } else {
                                acc &= v;
                            }
                        }
                    }
                    out[(row * w as i64 + col) as usize] = acc;
                }
            }
            out
        };

        let dilated = imaging::dilate_disk(&mask, h, w, radius);
        assert_eq!(dilated, gather(&mask, true), "dilate case {case}");
        let eroded = imaging::erode_disk(&mask, h, w, radius);
        assert_eq!(eroded, gather(&mask, false), "erode case {case}");

        let cleaned = imaging::morphological_cleanup(&mask, h, w, radius);
        let expected = gather(&gather(&gather(&gather(&mask, true), false), false), true);
        assert_eq!(cleaned, expected, "cleanup case {case}");
    }
}

#[test]
fn pinholes_close_under_cleanup() {
    // Solid 24x24 square with 1-px pinholes; closing fills them.
    let (h, w) = (32, 32);
    let mut mask = vec![false; h * w];
    for row in 4..28 {
        for col in 4..28 {
            mask[row * w + col] = true;
        }
    }
    for &(r, c) in &[(10usize, 10usize), (15, 20), (22, 8)] {
        mask[r * w + c] = false;
    }
    let cleaned = imaging::morphological_cleanup(&mask, h, w, 3);
    for &(r, c) in &[(10usize, 10usize), (15, 20), (22, 8)] {
        assert!(cleaned[r * w + c], "pinhole ({r},{c}) should close");
    }
}

#[test]
fn bicubic_downscale_matches_direct_kernel_sum() {
    // Linear ramp, downscaled 2x.
    let (h, w) = (12, 16);
    let mut image = RasterImage::new_filled(h, w, 0.5, 0.0);
    for row in 0..h {
        for col in 0..w {
            let v = (row as f64 + 2.0 * col as f64) / (h as f64 + 2.0 * w as f64);
            image.set_pixel(row, col, [v, v / 2.0, 1.0 - v]);
        }
    }
    let out = imaging::resample_bicubic(&image, 1.0).unwrap();
    assert_eq!(out.height, 6);
    assert_eq!(out.width, 8);

    // Direct (non-separable) kernel sum oracle.
    let ratio = 1.0 / 0.5;
    for or in 0..out.height {
        for oc in 0..out.width {
            let y = (or as f64 + 0.5) * ratio - 0.5;
            let x = (oc as f64 + 0.5) * ratio - 0.5;
            for ch in 0..3 {
                let mut acc = 0.0;
                for jy in (y.floor() as i64 - 1)..=(y.floor() as i64 + 2) {
                    for jx in (x.floor() as i64 - 1)..=(x.floor() as i64 + 2) {
                        let wy = imaging::catmull_rom_kernel(y - jy as f64);
                        let wx = imaging::catmull_rom_kernel(x - jx as f64);
                        let sr = jy.clamp(0, h as i64 - 1) as usize;
                        let sc = jx.clamp(0, w as i64 - 1) as usize;
                        acc += wy * wx * image.pixel(sr, sc)[ch];
                    }
                }
                let got = out.pixel(or, oc)[ch];
                assert!(
                    (got - acc.clamp(0.0, 1.0)).abs() < 1e-6,
                    "({or},{oc},{ch}): {got} vs {acc}"
                );
            }
        }
    }
}

/// Hand-rolled EM over explicit probability tables, structured nothing
/// like the production loop.
fn scripted_binary_em(
    decisions: &[Vec<u8>], // [rater][pixel]
    iterations: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let raters = decisions.len();
    let pixels = decisions[0].len();
    let prior = decisions
        .iter()
        .flat_map(|d| d.iter())
        .map(|&d| d as f64)
        .sum::<f64>()
        / (raters * pixels) as f64;
    let clamp = |x: f64| x.max(1e-6).min(1.0 - 1e-6);
    let prior = clamp(prior);
    let mut p = vec![0.99999f64; raters];
    let mut q = vec![0.99999f64; raters];
    let mut w = vec![0.0f64; pixels];
    for _ in 0..iterations {
        for i in 0..pixels {
            let mut lik1 = prior;
            let mut lik0 = 1.0 - prior;
            for j in 0..raters {
                let d = decisions[j][i];
                lik1 *= if d == 1 { p[j] } else { 1.0 - p[j] };
                lik0 *= if d == 1 { 1.0 - q[j] } else { q[j] };
            }
            w[i] = lik1 / (lik1 + lik0);
        }
        for j in 0..raters {
            let mut num_p = 0.0;
            let mut den_p = 0.0;
            let mut num_q = 0.0;
            let mut den_q = 0.0;
            for i in 0..pixels {
                if decisions[j][i] == 1 {
                    num_p += w[i];
                } else {
                    num_q += 1.0 - w[i];
                }
                den_p += w[i];
                den_q += 1.0 - w[i];
            }
            p[j] = clamp(num_p / den_p);
            q[j] = clamp(num_q / den_q);
        }
    }
    (w, p, q)
}

#[test]
fn staple_six_pixel_case_matches_scripted_em() {
    // 3 raters, 6 pixels, one dissent on pixel 2.
    let masks = vec![
        vec![true, true, false, false, true, false],
        vec![true, true, true, false, true, false],
        vec![true, true, false, false, true, false],
    ];
    let result = fusion::staple(&masks, &StapleParams::default()).unwrap();

    let decisions: Vec<Vec<u8>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| b as u8).collect())
        .collect();
    let (w, p, q) = scripted_binary_em(&decisions, result.iterations);
    for i in 0..6 {
        assert!(
            (result.posterior_fg[i] - w[i]).abs() < 1e-9,
            "pixel {i}: {} vs {}",
            result.posterior_fg[i],
            w[i]
        );
    }
    for j in 0..3 {
        assert!((result.sensitivity[j] - p[j]).abs() < 1e-9);
        assert!((result.specificity[j] - q[j]).abs() < 1e-9);
    }
}

#[test]
fn staple_recovers_truth_from_noisy_raters() {
    // Seeded 128x128 truth: union of a disk and a bar.
    let (h, w) = (128usize, 128usize);
    let mut truth = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let dr = row as f64 - 48.0;
            let dc = col as f64 - 56.0;
            let in_disk = dr * dr + dc * dc < 900.0;
            let in_bar = (80..100).contains(&row) && (20..110).contains(&col);
            truth[row * w + col] = in_disk || in_bar;
        }
    }
    let mut rng = rng_from_seed(4040);
    let masks: Vec<Vec<bool>> = (0..5)
        .map(|_| {
            truth
                .iter()
                .map(|&t| if rng.random_bool(0.95) { t } else { !t })
                .collect()
        })
        .collect();
    let result = fusion::staple(&masks, &StapleParams::default()).unwrap();
    let correct = result
        .consensus
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count();
    let accuracy = correct as f64 / (h * w) as f64;
    assert!(accuracy >= 0.99, "accuracy {accuracy}");
    for j in 0..5 {
        assert!((result.sensitivity[j] - 0.95).abs() < 0.03);
        assert!((result.specificity[j] - 0.95).abs() < 0.03);
    }
}

#[test]
fn multiclass_staple_recovers_shifted_rater_scene() {
    // 3 classes in vertical bands; one rater sees bands shifted by 2 px.
    let (h, w) = (64usize, 96usize);
    let band = |col: usize| -> u32 { (col * 3 / w) as u32 };
    let truth: Vec<u32> = (0..h * w).map(|idx| band(idx % w)).collect();
    let mut rng = rng_from_seed(5050);
    let noisy = |rng: &mut rand_chacha::ChaCha8Rng, shift: usize| -> Vec<u32> {
        (0..h * w)
            .map(|idx| {
                let col = (idx % w + shift).min(w - 1);
                let label = band(col);
                if rng.random_bool(0.95) {
                    label
                } else {
                    (label + rng.random_range(1..3)) % 3
                }
            })
            .collect()
    };
    let masks = vec![noisy(&mut rng, 0), noisy(&mut rng, 0), noisy(&mut rng, 2)];
    let result = fusion::staple_multiclass(&masks, 3, &StapleParams::default()).unwrap();
    let correct = result
        .consensus
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count();
    let accuracy = correct as f64 / (h * w) as f64;
    assert!(accuracy >= 0.95, "accuracy {accuracy}");
}

#[test]
fn soft_label_vote_example_matches_scalar_oracle() {
    // votes: rater0 class 1; rater1 nothing (benign by omission);
    // rater2 splits classes 2 and 3.
    let ont = deep_ontology();
    let a = AnnotatorMask::from_dense(&[Some(1)], 1, 1, Level::Explanation);
    let b = AnnotatorMask::from_dense(&[None], 1, 1, Level::Explanation);
    let c = {
        // One polygon covering the pixel with two classes.
        use softseg_core::annotations::{rasterize, AnnotationSet, PolygonRecord};
        let set = AnnotationSet {
            image_id: "x".into(),
            annotator_id: "c".into(),
            level: Level::Explanation,
            polygons: vec![PolygonRecord {
                vertices: vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
                raw_label: None,
                class_ids: vec![2, 3],
                created_seq: 1,
                source_grade: 1,
            }],
            image_size: (1, 1),
        };
        rasterize(&set, &ont).unwrap().mask
    };
    let soft = fusion::build_soft_labels(&[a, b, c], &[true], Level::Explanation, &ont).unwrap();
    let row = soft.pixel(0);
    assert!((row[1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((row[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((row[2] - 1.0 / 6.0).abs() < 1e-12);
    assert!((row[3] - 1.0 / 6.0).abs() < 1e-12);
    let sum: f64 = row.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn kappa_null_distribution_centers_on_zero() {
    // Independent fair coin flips per (image, rater): kappa ≈ 0.
    let mut rng = rng_from_seed(600);
    let images = 1000usize;
    let raters = 3usize;
    let used: Vec<bool> = (0..images * raters).map(|_| rng.random_bool(0.5)).collect();
    let table = PresenceTable::new(
        vec![1],
        Level::Explanation,
        (0..images).map(|i| format!("img{i}")).collect(),
        vec!["g".to_string(); images],
        raters,
        used,
    )
    .unwrap();
    let report = agreement::kappa_per_label(&table, Scope::Global, 1).unwrap();
    match report.kappa {
        KappaValue::Defined(v) => assert!(v.abs() < 0.1, "kappa {v}"),
        KappaValue::Undefined => panic!("kappa should be defined"),
    }
}

#[test]
fn pixel_agreement_matches_scalar_oracle() {
    let ont = deep_ontology();
    let mut rng = rng_from_seed(700);
    let (h, w) = (16usize, 16usize);
    let classes = 10usize;
    let foreground: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
    let votes: Vec<[u32; 3]> = (0..h * w)
        .map(|_| {
            [
                rng.random_range(0..classes as u32),
                rng.random_range(0..classes as u32),
                rng.random_range(0..classes as u32),
            ]
        })
        .collect();
    let masks: Vec<AnnotatorMask> = (0..3)
        .map(|r| {
            let labels: Vec<Option<u32>> = votes.iter().map(|v| Some(v[r])).collect();
            AnnotatorMask::from_dense(&labels, h, w, Level::Explanation)
        })
        .collect();
    let soft = fusion::build_soft_labels(&masks, &foreground, Level::Explanation, &ont).unwrap();
    let stats = agreement::pixel_agreement_stats(&[&soft]).unwrap();

    // Scalar oracle straight from the vote lists.
    let mut counts = vec![[0u64; 3]; classes];
    let mut unique = 0u64;
    let mut fg = 0u64;
    for idx in 0..h * w {
        if !foreground[idx] {
            continue;
        }
        fg += 1;
        let mut per_class = vec![0u32; classes];
        for r in 0..3 {
            per_class[votes[idx][r] as usize] += 1;
        }
        for c in 0..classes {
            if per_class[c] > 0 {
                counts[c][(per_class[c] - 1) as usize] += 1;
            }
        }
        let max = *per_class.iter().max().unwrap();
        if per_class.iter().filter(|&&v| v == max).count() == 1 {
            unique += 1;
        }
    }
    for c in 0..classes {
        let total: u64 = counts[c].iter().sum();
        for k in 0..3 {
            let expected = if total > 0 { counts[c][k] as f64 / total as f64 } else { 0.0 };
            assert!(
                (stats.share_by_agreement[c][k] - expected).abs() < 1e-9,
                "class {c} k {k}"
            );
        }
        if total > 0 {
            let share_sum: f64 = stats.share_by_agreement[c].iter().sum();
            assert!((share_sum - 1.0).abs() < 1e-9);
        }
    }
    assert!((stats.unique_majority_share - unique as f64 / fg as f64).abs() < 1e-9);
}

#[test]
fn soft_dice_and_ce_match_scalar_oracle_on_random_case() {
    let mut rng = rng_from_seed(800);
    let (n, c, p) = (2usize, 5usize, 17usize);
    let logits: Vec<f64> = (0..n * c * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut targets = vec![0.0f64; n * c * p];
    for i in 0..n {
        for j in 0..p {
            let simplex = random_simplex(&mut rng, c);
            for ch in 0..c {
                targets[(i * c + ch) * p + j] = simplex[ch];
            }
        }
    }
    let mask: Vec<bool> = (0..n * p).map(|_| rng.random_bool(0.7)).collect();

    // Scalar softmax.
    let prob = |i: usize, ch: usize, j: usize| -> f64 {
        let mut denom = 0.0;
        for k in 0..c {
            denom += (logits[(i * c + k) * p + j]).exp();
        }
        (logits[(i * c + ch) * p + j]).exp() / denom
    };

    // Printed soft dice equation, one term at a time.
    let mut dice_sum = 0.0;
    for ch in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..p {
                if mask[i * p + j] {
                    num += prob(i, ch, j) * targets[(i * c + ch) * p + j];
                    den += prob(i, ch, j) + targets[(i * c + ch) * p + j];
                }
            }
        }
        dice_sum += (2.0 * num + DICE_EPSILON) / (den + DICE_EPSILON);
    }
    let expected_dice = 1.0 - dice_sum / c as f64;
    let got = objectives::soft_dice_loss(&logits, &targets, &mask, n, c, p, DICE_EPSILON).unwrap();
    assert!((got.value - expected_dice).abs() < 1e-12);

    // Printed cross-entropy.
    let counted = mask.iter().filter(|&&m| m).count() as f64;
    let mut ce = 0.0;
    for i in 0..n {
        for j in 0..p {
            if mask[i * p + j] {
                for ch in 0..c {
                    ce -= targets[(i * c + ch) * p + j] * (prob(i, ch, j) + 1e-12).ln();
                }
            }
        }
    }
    let got_ce = objectives::cross_entropy_soft(&logits, &targets, &mask, n, c, p).unwrap();
    assert!((got_ce.value - ce / counted).abs() < 1e-12);
}

#[test]
fn tree_loss_two_pixel_toy_matches_scalar_combination() {
    let ont = deep_ontology();
    let mut rng = rng_from_seed(900);
    let (c, p) = (10usize, 2usize);
    let logits: Vec<f64> = (0..c * p).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut targets = vec![0.0f64; c * p];
    for j in 0..p {
        let simplex = random_simplex(&mut rng, c);
        for ch in 0..c {
            targets[ch * p + j] = simplex[ch];
        }
    }
    let mask = vec![true, true];
    let tree = objectives::tree_loss(
        objectives::TreeBase::SoftDice,
        0.5,
        &logits,
        &targets,
        &mask,
        1,
        c,
        p,
        &ont,
        Level::Explanation,
        DICE_EPSILON,
    )
    .unwrap();

    // Oracle: evaluate base at the fine level, then on scalar-remapped
    // distributions, and mix.
    let direct = objectives::soft_dice_loss(&logits, &targets, &mask, 1, c, p, DICE_EPSILON)
        .unwrap()
        .value;
    let probs = objectives::softmax(&logits, 1, c, p);
    let parents = [0usize, 1, 1, 2, 2, 2, 3, 3, 3, 3];
    let mut p_map = vec![0.0f64; 4 * p];
    let mut y_map = vec![0.0f64; 4 * p];
    for j in 0..p {
        for ch in 0..c {
            p_map[parents[ch] * p + j] += probs[ch * p + j];
            y_map[parents[ch] * p + j] += targets[ch * p + j];
        }
    }
    // Mapped term value via the printed equation on remapped inputs.
    let mut dice_sum = 0.0;
    for k in 0..4 {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..p {
            num += p_map[k * p + j] * y_map[k * p + j];
            den += p_map[k * p + j] + y_map[k * p + j];
        }
        dice_sum += (2.0 * num + DICE_EPSILON) / (den + DICE_EPSILON);
    }
    let mapped = 1.0 - dice_sum / 4.0;
    assert!((tree.value - (0.5 * direct + 0.5 * mapped)).abs() < 1e-12);
}

#[test]
fn metrics_match_scalar_oracle_on_random_maps() {
    let mut rng = rng_from_seed(1000);
    let (pixels, classes) = (120usize, 6usize);
    let mut p = Vec::with_capacity(pixels * classes);
    let mut y = Vec::with_capacity(pixels * classes);
    for _ in 0..pixels {
        p.extend(random_simplex(&mut rng, classes));
        y.extend(random_simplex(&mut rng, classes));
    }
    let mask: Vec<bool> = (0..pixels).map(|_| rng.random_bool(0.8)).collect();

    // Macro SoftDice oracle.
    let mut total = 0.0;
    for ch in 0..classes {
        let mut pm = 0.0;
        let mut ym = 0.0;
        let mut d = 0.0;
        for idx in 0..pixels {
            if mask[idx] {
                pm += p[idx * classes + ch];
                ym += y[idx * classes + ch];
                d += (p[idx * classes + ch] - y[idx * classes + ch]).abs();
            }
        }
        total += (pm + ym - d + 1e-6) / (pm + ym + 1e-6);
    }
    let expected = total / classes as f64;
    let got = metrics::macro_softdice(&p, &y, &mask, classes, 1e-6).unwrap();
    assert!((got - expected).abs() < 1e-9);

    // L1 oracle, both normalizations.
    let counted = mask.iter().filter(|&&m| m).count() as f64;
    let mut l1 = 0.0;
    for idx in 0..pixels {
        if mask[idx] {
            for ch in 0..classes {
                l1 += (p[idx * classes + ch] - y[idx * classes + ch]).abs();
            }
        }
    }
    let got_default = metrics::l1_metric(&p, &y, &mask, classes, L1Normalization::PerPixel).unwrap();
    assert!((got_default - l1 / (2.0 * counted)).abs() < 1e-12);
    let got_printed =
        metrics::l1_metric(&p, &y, &mask, classes, L1Normalization::PerPixelPerClass).unwrap();
    assert!((got_printed - l1 / (2.0 * counted * classes as f64)).abs() < 1e-12);
}

#[test]
fn hard_metrics_match_counting_oracle() {
    let mut rng = rng_from_seed(1100);
    let pixels = 200usize;
    let classes = 5usize;
    let pred: Vec<u32> = (0..pixels).map(|_| rng.random_range(0..classes as u32)).collect();
    let labels: Vec<u32> = (0..pixels).map(|_| rng.random_range(0..3u32)).collect();
    let valid: Vec<bool> = (0..pixels).map(|_| rng.random_bool(0.85)).collect();

    let mut tp = vec![0u64; classes];
    let mut pc = vec![0u64; classes];
    let mut gc = vec![0u64; classes];
    let mut correct = 0u64;
    let mut counted = 0u64;
    for idx in 0..pixels {
        if !valid[idx] {
            continue;
        }
        counted += 1;
        pc[pred[idx] as usize] += 1;
        gc[labels[idx] as usize] += 1;
        if pred[idx] == labels[idx] {
            tp[pred[idx] as usize] += 1;
            correct += 1;
        }
    }
    let micro = metrics::dice_micro(&pred, &labels, &valid).unwrap();
    assert_eq!(micro, correct as f64 / counted as f64);

    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for ch in 0..classes {
        if pc[ch] + gc[ch] == 0 {
            continue;
        }
        macro_sum += (2.0 * tp[ch] as f64 + 1e-6) / ((pc[ch] + gc[ch]) as f64 + 1e-6);
        macro_n += 1;
    }
    let macro_dice = metrics::dice_macro(&pred, &labels, &valid, classes, false, 1e-6).unwrap();
    assert!((macro_dice - macro_sum / macro_n as f64).abs() < 1e-12);

    let confusion = metrics::confusion_matrix(&pred, &labels, &valid, classes).unwrap();
    for row in 0..classes {
        let row_total: f64 = (0..classes)
            .map(|col| {
                (0..pixels)
                    .filter(|&i| valid[i] && labels[i] as usize == row && pred[i] as usize == col)
                    .count() as f64
            })
            .sum();
        for col in 0..classes {
            let cell = (0..pixels)
                .filter(|&i| valid[i] && labels[i] as usize == row && pred[i] as usize == col)
                .count() as f64;
            let expected = if row_total > 0.0 { 100.0 * cell / row_total } else { 0.0 };
            assert!((confusion[row * classes + col] - expected).abs() < 1e-9);
        }
    }
}

/// Predictor whose tile output depends on absolute intensity, so adjacent
/// tiles disagree and the blend actually mixes values.
struct MeanModel;

impl TilePredictor for MeanModel {
    fn classes(&self) -> usize {
        2
    }
    fn predict_tile(&self, window: &[f64], height: usize, width: usize) -> Vec<f64> {
        let hw = height * width;
        let mean: f64 = window[..hw].iter().sum::<f64>() / hw as f64;
        let mut out = vec![0.0; 2 * hw];
        out[..hw].fill(mean.clamp(0.05, 0.95));
        out[hw..].fill(1.0 - mean.clamp(0.05, 0.95));
        out
    }
}

#[test]
fn sliding_window_two_tile_blend_matches_scalar_oracle() {
    let (h, w) = (8usize, 12usize);
    let mut image = RasterImage::new_filled(h, w, 1.0, 0.0);
    for row in 0..h {
        for col in 0..w {
            image.set_pixel(row, col, [col as f64 / w as f64, 0.0, 0.0]);
        }
    }
    let config = SlidingWindowConfig {
        window: 8,
        overlap: 0.5,
        sigma_frac: 0.125,
        weight_floor: 1e-3,
    };
    let pred = inference::sliding_window_predict(&MeanModel, &image, Level::Pattern, &config).unwrap();

    // Oracle: tiles start at columns 0 and 4; each pixel blends the tiles
    // covering it with independently recomputed Gaussian weights.
    let tile_probs = |col0: usize| -> Vec<f64> {
        let mut window = vec![0.0; 3 * 64];
        for ch in 0..3 {
            for r in 0..8 {
                for c in 0..8 {
                    window[(ch * 8 + r) * 8 + c] = image.pixel(r, col0 + c)[ch];
                }
            }
        }
        MeanModel.predict_tile(&window, 8, 8)
    };
    let t0 = tile_probs(0);
    let t1 = tile_probs(4);
    let sigma = 0.125 * 8.0;
    let center = 3.5f64;
    let weight = |r: usize, c: usize| -> f64 {
        let dy = r as f64 - center;
        let dx = c as f64 - center;
        ((-(dy * dy) / (2.0 * sigma * sigma)).exp() * (-(dx * dx) / (2.0 * sigma * sigma)).exp())
            .max(1e-3)
    };
    for row in 0..h {
        for col in 0..w {
            let mut num = [0.0f64; 2];
            let mut den = 0.0f64;
            if col < 8 {
                let w0 = weight(row, col);
                den += w0;
                for ch in 0..2 {
                    num[ch] += w0 * t0[(ch * 8 + row) * 8 + col];
                }
            }
            if col >= 4 {
                let w1 = weight(row, col - 4);
                den += w1;
                for ch in 0..2 {
                    num[ch] += w1 * t1[(ch * 8 + row) * 8 + col - 4];
                }
            }
            for ch in 0..2 {
                let expected = num[ch] / den;
                let got = pred.pixel(row * w + col)[ch];
                assert!(
                    (got - expected).abs() < 1e-6,
                    "({row},{col},{ch}): {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn splitter_matches_exhaustive_optimum_on_12_images() {
    // Two image archetypes; 12 images split 8/2/2.
    let mut rng = rng_from_seed(1200);
    let counts: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            if i % 3 == 0 {
                vec![
                    100.0 + rng.random_range(0.0..5.0),
                    10.0 + rng.random_range(0.0..2.0),
                ]
            } else {
                vec![
                    20.0 + rng.random_range(0.0..5.0),
                    60.0 + rng.random_range(0.0..2.0),
                ]
            }
        })
        .collect();
    let fractions = [0.70, 0.15, 0.15];

    // Exhaustive oracle over all (8,2,2) partitions.
    let mut best = f64::INFINITY;
    let n = 12usize;
    for val_a in 0..n {
        for val_b in (val_a + 1)..n {
            for test_a in 0..n {
                if test_a == val_a || test_a == val_b {
                    continue;
                }
                for test_b in (test_a + 1)..n {
                    if test_b == val_a || test_b == val_b {
                        continue;
                    }
                    let assignment: Vec<Split> = (0..n)
                        .map(|i| {
                            if i == val_a || i == val_b {
                                Split::Val
                            } else if i == test_a || i == test_b {
                                Split::Test
                            } else {
                                Split::Train
                            }
                        })
                        .collect();
                    let objective = splitter::split_objective(&counts, &assignment, 2);
                    if objective < best {
                        best = objective;
                    }
                }
            }
        }
    }

    // 50 seeded restarts of the hill climber.
    let mut found = f64::INFINITY;
    for seed in 0..50 {
        let result = splitter::optimize_split(&counts, fractions, 3000, seed).unwrap();
        if result.objective < found {
            found = result.objective;
        }
    }
    assert!(
        (found - best).abs() < 1e-9,
        "hill climbing {found} vs exhaustive {best}"
    );
}

#[test]
fn evaluate_composition_matches_direct_pattern_evaluation() {
    use softseg_core::fusion::SoftLabelMap;
    use softseg_core::inference::PredictiveMap;

    let ont = deep_ontology();
    let mut rng = rng_from_seed(1300);
    let (h, w) = (10usize, 10usize);
    let classes = 10usize;

    // One-hot explanation-level predictions and quantized soft labels.
    let mut probs = vec![0.0f64; h * w * classes];
    let mut soft_probs = vec![0.0f64; h * w * classes];
    for idx in 0..h * w {
        probs[idx * classes + rng.random_range(0..classes)] = 1.0;
        let votes = [
            rng.random_range(0..classes),
            rng.random_range(0..classes),
            rng.random_range(0..classes),
        ];
        for v in votes {
            soft_probs[idx * classes + v] += 1.0 / 3.0;
        }
    }
    let soft = SoftLabelMap {
        height: h,
        width: w,
        classes,
        level: Level::Explanation,
        annotator_count: 3,
        vote_denominator: 3,
        probs: soft_probs,
        foreground: vec![true; h * w],
        ambiguous: vec![false; h * w],
    };
    let pred = PredictiveMap {
        height: h,
        width: w,
        classes,
        level: Level::Explanation,
        probs,
        foreground: None,
    };

    let via_evaluate = metrics::evaluate(&pred, &soft, &ont, Level::Pattern).unwrap();
    let remapped_pred = inference::predict_remapped(&pred, &ont, Level::Pattern).unwrap();
    let remapped_soft = soft.remap_up(&ont, Level::Pattern).unwrap();
    let direct = metrics::evaluate(&remapped_pred, &remapped_soft, &ont, Level::Pattern).unwrap();

    assert!((via_evaluate.macro_soft_dice - direct.macro_soft_dice).abs() < 1e-12);
    assert!((via_evaluate.l1 - direct.l1).abs() < 1e-12);
    assert_eq!(via_evaluate.dice, direct.dice);
    assert_eq!(via_evaluate.macro_dice, direct.macro_dice);
}

#[test]
fn identity_prediction_scores_perfectly() {
    use softseg_core::fusion::SoftLabelMap;
    use softseg_core::inference::PredictiveMap;

    let ont = deep_ontology();
    let mut rng = rng_from_seed(1400);
    let (h, w) = (8usize, 8usize);
    let classes = 10usize;
    let mut soft_probs = vec![0.0f64; h * w * classes];
    for idx in 0..h * w {
        // Unanimous votes so every pixel has a strict majority.
        let class = rng.random_range(0..classes);
        soft_probs[idx * classes + class] = 1.0;
    }
    let soft = SoftLabelMap {
        height: h,
        width: w,
        classes,
        level: Level::Explanation,
        annotator_count: 3,
        vote_denominator: 3,
        probs: soft_probs.clone(),
        foreground: vec![true; h * w],
        ambiguous: vec![false; h * w],
    };
    let pred = PredictiveMap {
        height: h,
        width: w,
        classes,
        level: Level::Explanation,
        probs: soft_probs,
        foreground: None,
    };
    let run = metrics::evaluate(&pred, &soft, &ont, Level::Explanation).unwrap();
    assert!((run.macro_soft_dice - 1.0).abs() < 1e-9);
    assert!(run.l1 < 1e-12);
    assert_eq!(run.dice, 1.0);
    assert_eq!(run.macro_dice, 1.0);
}
