use latgeo_core::data::{generate_scene, read_scenes, write_scenes, BBox, SynthConfig, Vocabulary, PAD, START, UNK};
use latgeo_core::decode::decode_log_probs;
use latgeo_core::geometry::{pairwise_features, relation_embedding, GeometryKind};
use latgeo_core::metrics::{bleu, cider_d, rouge_l, split};
use latgeo_core::numeric::Mask;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (1.0..640.0f64, 1.0..480.0f64, 2.0..400.0f64, 2.0..400.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "cat", "dog", "left", "of", "the"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn relation_is_antisymmetric_with_zero_diagonal(boxes in prop::collection::vec(bbox(), 1..7)) {
        let xi = pairwise_features(&boxes, GeometryKind::Ratio);
        for a in 0..boxes.len() {
            prop_assert_eq!(xi.get(a, a), [0.0; 4]);
            for b in 0..boxes.len() {
                let (p, q) = (xi.get(a, b), xi.get(b, a));
                for k in 0..4 {
                    prop_assert_eq!(p[k], -q[k]);
                }
            }
        }
    }

    #[test]
    fn relation_ignores_a_common_scale(boxes in prop::collection::vec(bbox(), 1..6), s in 0.05..50.0f64) {
        for kind in [GeometryKind::Ratio, GeometryKind::L1] {
            let xi = pairwise_features(&boxes, kind);
            let scaled: Vec<BBox> = boxes.iter().map(|b| b.scaled(s)).collect();
            let ys = pairwise_features(&scaled, kind);
            for (p, q) in xi.as_slice().iter().zip(ys.as_slice()) {
                for k in 0..4 {
                    prop_assert!((p[k] - q[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relation_embedding_is_bounded(boxes in prop::collection::vec(bbox(), 1..5)) {
        let emb = relation_embedding(&pairwise_features(&boxes, GeometryKind::Ratio), 16).unwrap();
        prop_assert!(emb.data().iter().all(|v| v.abs() <= 1.0));
        // sin^2 + cos^2 = 1 for every component and frequency
        for r in 0..emb.rows() {
            let row = emb.row(r);
            for k in 0..8 {
                prop_assert!((row[k] * row[k] + row[8 + k] * row[8 + k] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_stay_in_range(c in sentence(), refs in prop::collection::vec(sentence(), 1..4)) {
        let hyp = vec![split(&c)];
        let r = vec![refs.iter().map(|s| split(s)).collect::<Vec<_>>()];
        let b = bleu(&hyp, &r, 4);
        prop_assert!(b.corpus.iter().all(|v| (0.0..=1.0).contains(v)));
        let (rl, _) = rouge_l(&hyp, &r);
        prop_assert!((0.0..=1.0).contains(&rl));
        let (cd, _) = cider_d(&hyp, &r);
        prop_assert!((0.0..=10.0 + 1e-9).contains(&cd));
    }

    #[test]
    fn identical_candidates_get_full_bleu_and_rouge(s in sentence()) {
        prop_assume!(!s.is_empty());
        let hyp = vec![split(&s)];
        let r = vec![vec![split(&s)]];
        prop_assert_eq!(bleu(&hyp, &r, 1).corpus[0], 1.0);
        prop_assert_eq!(rouge_l(&hyp, &r).0, 1.0);
    }

    #[test]
    fn decode_distribution_excludes_reserved_ids(logits in prop::collection::vec(-20.0..20.0f64, 5..12)) {
        let lp = decode_log_probs(&logits);
        for id in [PAD, START, UNK] {
            prop_assert_eq!(lp[id], f64::NEG_INFINITY);
        }
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_causal_mask_never_crosses_segments(lengths in prop::collection::vec(1..6usize, 1..4)) {
        let m = Mask::block_causal(&lengths);
        let mut seg = Vec::new();
        for (s, &l) in lengths.iter().enumerate() {
            seg.extend((0..l).map(|p| (s, p)));
        }
        for (i, a) in seg.iter().enumerate() {
            for (j, b) in seg.iter().enumerate() {
                prop_assert_eq!(m.allows(i, j), a.0 == b.0 && b.1 <= a.1);
            }
        }
    }

    #[test]
    fn scenes_survive_jsonl(seed in 0..10_000u64) {
        let scene = generate_scene(seed, &SynthConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_scenes(&mut buf, std::slice::from_ref(&scene)).unwrap();
        let back = read_scenes(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0], &scene);
    }

    #[test]
    fn known_words_round_trip_through_the_vocabulary(caps in prop::collection::vec(sentence(), 1..5)) {
        let v = Vocabulary::build(caps.iter().map(String::as_str), 0);
        for c in &caps {
            prop_assert_eq!(&v.decode(&v.encode(c)), c);
        }
    }
}
