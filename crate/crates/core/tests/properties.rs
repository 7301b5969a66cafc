use std::collections::BTreeMap;

use proptest::prelude::*;

use engage_core::cluster::{fit_points, KMeansConfig};
use engage_core::features::{
    normalize_reaction_values, smoothed_idf, EngagementKind, VocabConfig, Vocabulary,
};
use engage_core::labeling::{sample_comments, split_corpus, ImageInput, Post};
use engage_core::training::{cross_entropy, soft_cross_entropy};
use engage_core::transfer::{argmax, binary_auc, macro_auc};

const WORDS: [&str; 8] = ["sun", "moon", "cat", "dog", "rain", "tea", "owl", "sky"];

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn corpus(n: usize) -> Vec<Post> {
    (0..n)
        .map(|i| Post {
            id: format!("p{i:04}"),
            image: ImageInput::Features {
                features: vec![i as f64],
            },
            comments: vec![],
            reactions: Default::default(),
        })
        .collect()
}

proptest! {
    #[test]
    fn reaction_normalization_is_unit_idempotent_and_scale_free(
        raw in prop::array::uniform5(0u32..1000),
        scale in 1u32..50,
    ) {
        let raw = raw.map(f64::from);
        match normalize_reaction_values(&raw) {
            None => prop_assert!(raw.iter().all(|x| *x == 0.0)),
            Some(v) => {
                prop_assert!((norm(&v.values) - 1.0).abs() < 1e-12);
                let again = normalize_reaction_values(&[v.values[0], v.values[1], v.values[2], v.values[3], v.values[4]]).unwrap();
                let scaled = normalize_reaction_values(&raw.map(|x| x * f64::from(scale))).unwrap();
                for i in 0..5 {
                    prop_assert!((again.values[i] - v.values[i]).abs() < 1e-12);
                    prop_assert!((scaled.values[i] - v.values[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn comment_embedding_ignores_word_order(
        words in prop::collection::vec(0usize..WORDS.len(), 1..12),
        rotate in 0usize..12,
    ) {
        let vocab = Vocabulary::fit(&["sun moon cat", "dog rain tea", "owl sky sun"], &VocabConfig::default()).unwrap();
        let text: Vec<&str> = words.iter().map(|w| WORDS[*w]).collect();
        let mut permuted = text.clone();
        let r = rotate % permuted.len();
        permuted.rotate_left(r);
        permuted.reverse();
        let a = vocab.embed_comment(&text.join(" "));
        let b = vocab.embed_comment(&permuted.join(" "));
        prop_assert_eq!(a.skip, b.skip);
        for (x, y) in a.vector.values.iter().zip(&b.vector.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        if !a.skip {
            prop_assert!((norm(&a.vector.values) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idf_decreases_with_document_frequency(n in 1usize..10_000, df in 1usize..10_000) {
        let df = df.min(n);
        prop_assert!(smoothed_idf(n, df) >= 1.0);
        if df < n {
            prop_assert!(smoothed_idf(n, df) > smoothed_idf(n, df + 1));
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..300, frac in 0.05f64..0.9, seed in any::<u64>()) {
        let posts = corpus(n);
        if let Ok(s) = split_corpus(&posts, frac, seed) {
            prop_assert_eq!(s.cluster_fit_ids.len() + s.train_ids.len(), n);
            let mut all: Vec<&String> = s.cluster_fit_ids.iter().chain(&s.train_ids).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn comment_sampling_keeps_order_and_size(n in 0usize..40, max_n in 1usize..20, seed in any::<u64>()) {
        let comments: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
        let s = sample_comments(&comments, max_n, seed);
        prop_assert_eq!(s.len(), n.min(max_n));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 4..60),
        labels in prop::collection::vec(0usize..3, 60),
    ) {
        let labels = &labels[..scores.len()];
        let base: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| f64::from(*x)).collect()).collect();
        let mapped: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|x| (x * 0.7).exp() + 3.0).collect()).collect();
        match (macro_auc(&base, labels), macro_auc(&mapped, labels)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "evaluability changed"),
        }
    }

    #[test]
    fn auc_flips_when_scores_are_negated(
        scores in prop::collection::vec(-100i32..100, 2..80),
        positive in prop::collection::vec(any::<bool>(), 80),
    ) {
        let s: Vec<f64> = scores.iter().map(|x| f64::from(*x)).collect();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let p = &positive[..s.len()];
        if let (Some(a), Some(b)) = (binary_auc(&s, p), binary_auc(&neg, p)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_soft_target_matches_cross_entropy(
        logits in prop::collection::vec(-50.0f64..50.0, 2..30),
        label in 0usize..30,
    ) {
        let y = label % logits.len();
        let a = soft_cross_entropy(&logits, &BTreeMap::from([(y, 1.0)])).unwrap();
        let b = cross_entropy(&logits, y).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(y == argmax(&logits) || a > 0.0);
    }

    #[test]
    fn kmeans_result_is_a_fixed_point(
        raw in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 3..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let cfg = KMeansConfig { k, seed, ..Default::default() };
        if let Ok(m) = fit_points(&raw, EngagementKind::Reaction, &cfg) {
            prop_assert!((m.inertia_of(&raw) - m.inertia).abs() < 1e-9 * (1.0 + m.inertia));
            let assign: Vec<usize> = raw.iter().map(|p| m.assign_values(p).unwrap()).collect();
            for c in 0..m.k {
                let members: Vec<&Vec<f64>> = raw.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
                prop_assert!(!members.is_empty());
                for j in 0..2 {
                    let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mean - m.centroid(c)[j]).abs() < 1e-6);
                }
            }
        }
    }
}
