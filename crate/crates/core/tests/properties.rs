//! Property tests for the conservation and invariance contracts.

use proptest::prelude::*;
use softseg_core::annotations::AnnotatorMask;
use softseg_core::fusion::{self, majority_vote, SoftLabelMap};
use softseg_core::imaging::{apply_augment, AugmentDraw, RasterImage};
use softseg_core::ontology::{Level, Ontology, OntologyNode};

fn node(id: u32, level: Level, parent: Option<u32>) -> OntologyNode {
    OntologyNode {
        id,
        name: format!("{level}-{id}"),
        short_name: format!("{id}"),
        level,
        parent_id: parent,
        color: [0, 0, 0],
    }
}

fn deep_ontology() -> Ontology {
    let mut nodes = Vec::new();
    for id in 0..4 {
        nodes.push(node(id, Level::Pattern, None));
    }
    let parents = [0u32, 1, 1, 2, 2, 2, 3, 3, 3, 3];
    for (id, &p) in parents.iter().enumerate() {
        nodes.push(node(id as u32, Level::Explanation, Some(p)));
    }
    let sub_parents = [0u32, 1, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9];
    for (id, &p) in sub_parents.iter().enumerate() {
        nodes.push(node(id as u32, Level::SubExplanation, Some(p)));
    }
    Ontology::new(nodes).unwrap()
}

fn simplex(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, classes).prop_map(|mut v| {
        let sum: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= sum;
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn remap_conserves_probability(rows in prop::collection::vec(simplex(12), 1..20)) {
        let ont = deep_ontology();
        let dist: Vec<f64> = rows.iter().flatten().copied().collect();
        let out = ont.remap_up(&dist, Level::SubExplanation, Level::Pattern).unwrap();
        for (row_idx, row) in rows.iter().enumerate() {
            let before: f64 = row.iter().sum();
            let after: f64 = out[row_idx * 4..(row_idx + 1) * 4].iter().sum();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn remap_composes(rows in prop::collection::vec(simplex(12), 1..12)) {
        let ont = deep_ontology();
        let dist: Vec<f64> = rows.iter().flatten().copied().collect();
        let direct = ont.remap_up(&dist, Level::SubExplanation, Level::Pattern).unwrap();
        let mid = ont.remap_up(&dist, Level::SubExplanation, Level::Explanation).unwrap();
        let composed = ont.remap_up(&mid, Level::Explanation, Level::Pattern).unwrap();
        for (a, b) in direct.iter().zip(composed.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn remap_of_one_hot_is_one_hot(class in 0u32..12) {
        let ont = deep_ontology();
        let mut dist = vec![0.0f64; 12];
        dist[class as usize] = 1.0;
        let out = ont.remap_up(&dist, Level::SubExplanation, Level::Pattern).unwrap();
        let ones = out.iter().filter(|&&v| v == 1.0).count();
        let zeros = out.iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(ones, 1);
        prop_assert_eq!(zeros, 3);
    }

    #[test]
    fn soft_labels_sum_to_one_and_ignore_rater_order(
        votes in prop::collection::vec(prop::collection::vec(prop::option::of(0u32..10), 3), 4..24),
        order in prop::sample::select(vec![[0usize, 1, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]]),
    ) {
        let ont = deep_ontology();
        let pixels = votes.len();
        let masks: Vec<AnnotatorMask> = (0..3)
            .map(|r| {
                let labels: Vec<Option<u32>> = votes.iter().map(|v| v[r]).collect();
                AnnotatorMask::from_dense(&labels, 1, pixels, Level::Explanation)
            })
            .collect();
        let fg = vec![true; pixels];
        let soft = fusion::build_soft_labels(&masks, &fg, Level::Explanation, &ont).unwrap();
        for idx in 0..pixels {
            let sum: f64 = soft.pixel(idx).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        let reordered: Vec<AnnotatorMask> = order.iter().map(|&i| masks[i].clone()).collect();
        let soft2 = fusion::build_soft_labels(&reordered, &fg, Level::Explanation, &ont).unwrap();
        prop_assert_eq!(soft.probs, soft2.probs);
    }

    #[test]
    fn majority_recovers_one_hot_everywhere(labels in prop::collection::vec(0u32..10, 1..40)) {
        let ont = deep_ontology();
        let pixels = labels.len();
        let dense: Vec<Option<u32>> = labels.iter().map(|&l| Some(l)).collect();
        let mask = AnnotatorMask::from_dense(&dense, 1, pixels, Level::Explanation);
        let soft = fusion::build_soft_labels(
            &[mask.clone(), mask.clone(), mask],
            &vec![true; pixels],
            Level::Explanation,
            &ont,
        )
        .unwrap();
        let majority = majority_vote(&soft);
        for idx in 0..pixels {
            prop_assert!(majority.valid[idx]);
            prop_assert_eq!(majority.labels[idx], labels[idx]);
        }
    }

    #[test]
    fn augmentation_conserves_label_mass(
        hflip: bool,
        vflip: bool,
        turns in 0u8..4,
        rows in prop::collection::vec(simplex(4), 16),
    ) {
        let image = RasterImage::new_filled(4, 4, 1.0, 0.5);
        let probs: Vec<f64> = rows.iter().flatten().copied().collect();
        let labels = SoftLabelMap {
            height: 4,
            width: 4,
            classes: 4,
            level: Level::Explanation,
            annotator_count: 1,
            vote_denominator: 1,
            probs,
            foreground: vec![true; 16],
            ambiguous: vec![false; 16],
        };
        let draw = AugmentDraw {
            hflip,
            vflip,
            quarter_turns: turns,
            ..AugmentDraw::IDENTITY
        };
        let (_, out) = apply_augment(&image, &labels, &draw);
        for c in 0..4 {
            let before: f64 = labels.probs.iter().skip(c).step_by(4).sum();
            let after: f64 = out.probs.iter().skip(c).step_by(4).sum();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn staple_posterior_rows_normalized(
        flips in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 3), 12..40),
    ) {
        let masks: Vec<Vec<bool>> = (0..3)
            .map(|r| flips.iter().map(|f| f[r]).collect())
            .collect();
        let result = fusion::staple(&masks, &fusion::StapleParams::default()).unwrap();
        for &w in &result.posterior_fg {
            prop_assert!(w.is_finite());
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
