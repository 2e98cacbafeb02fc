mod common;

use common::*;
use forest_core::analysis::{count_noisy_logits, NoisyLogitConfig};
use forest_core::evaluation::{average_precision, evaluate, pr_curve, Detection, EvalParams, GroundTruth};
use forest_core::nms::{class_aware_nms_indices, threshold_linear, BBox, Proposal, ResamplingConfig};
use forest_core::scoring::{infer_label_tree, score_forest, score_tree, softmax, LogitRecord};
use forest_core::synthetic::demo_dataset;
use forest_core::taxonomy::{geo_mask_channel, ClassificationTree, Forest, Group};
use forest_core::tree_builder::{build_geometric_tree, kmeans, FeatureTable, KMeansConfig, DEFAULT_MASK_GRID};
use proptest::prelude::*;

/// Logits with a matching tree: (fine logits, parent logits, leaf -> parent).
fn tree_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (2usize..40, 1usize..8).prop_flat_map(|(n, m)| {
        let m = m.min(n);
        (
            prop::collection::vec(-20.0f64..20.0, n),
            prop::collection::vec(-20.0f64..20.0, m),
            prop::collection::vec(0..m, n - m),
            Just(m),
        )
            .prop_map(|(z, zu, rest, m)| {
                let lp: Vec<usize> = (0..m).chain(rest).collect();
                (z, zu, lp)
            })
    })
}

fn record(z: &[f64], zu: &[f64]) -> LogitRecord {
    LogitRecord::new("p", z.to_vec()).with_parent("t", zu.to_vec())
}

fn grid_box() -> impl Strategy<Value = BBox> {
    (0u8..12, 0u8..12, 1u8..8, 1u8..8).prop_map(|(x, y, w, h)| BBox {
        x1: x as f64,
        y1: y as f64,
        x2: (x + w) as f64,
        y2: (y + h) as f64,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tree_scores_normalised_and_shift_invariant((z, zu, lp) in tree_case(), a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let t = ClassificationTree::from_assignment("t", zu.len(), lp);
        let s = score_tree(&record(&z, &zu), &t).unwrap();
        prop_assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let zs: Vec<f64> = z.iter().map(|v| v + a).collect();
        let zus: Vec<f64> = zu.iter().map(|v| v + b).collect();
        let shifted = score_tree(&record(&zs, &zus), &t).unwrap();
        for (x, y) in s.scores.iter().zip(&shifted.scores) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn tree_label_is_score_argmax((z, zu, lp) in tree_case()) {
        let t = ClassificationTree::from_assignment("t", zu.len(), lp);
        let rec = record(&z, &zu);
        let s = score_tree(&rec, &t).unwrap();
        prop_assert_eq!(infer_label_tree(&rec, &t).unwrap(), s.label);
        let best = s.scores.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(s.scores[s.label], best);
    }

    #[test]
    fn tree_matches_linear_oracle((z, zu, lp) in tree_case()) {
        let t = ClassificationTree::from_assignment("t", zu.len(), lp.clone());
        let s = score_tree(&record(&z, &zu), &t).unwrap();
        let want = linear_tree_scores(&z, &zu, &lp);
        for (x, y) in s.scores.iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forest_is_permutation_invariant((z, zu, lp) in tree_case(), zu2 in prop::collection::vec(-5.0f64..5.0, 1..4)) {
        let n = z.len();
        let m2 = zu2.len().min(n);
        let lp2: Vec<usize> = (0..n).map(|i| i % m2).collect();
        let rec = record(&z, &zu).with_parent("u", zu2[..m2].to_vec());
        let t1 = ClassificationTree::from_assignment("t", zu.len(), lp);
        let t2 = ClassificationTree::from_assignment("u", m2, lp2);
        let a = score_forest(&rec, &Forest::new(vec![t1.clone(), t2.clone()], n).unwrap()).unwrap();
        let b = score_forest(&rec, &Forest::new(vec![t2, t1], n).unwrap()).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_count_is_scale_invariant(v in prop::collection::vec(0.001f64..10.0, 2..30), k in 0.01f64..100.0, gt in 0usize..30) {
        let gt = gt % v.len();
        let cfg = NoisyLogitConfig::new(0.1, 0.05).unwrap();
        // scale by a power of two so the shares are bit-identical
        let k = 2f64.powi(k.log2().round() as i32);
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert_eq!(count_noisy_logits(&v, gt, &cfg).unwrap(), count_noisy_logits(&scaled, gt, &cfg).unwrap());
        let s = softmax(&v).unwrap();
        let c = count_noisy_logits(&s, gt, &cfg).unwrap();
        prop_assert!(c.total() <= v.len());
    }

    #[test]
    fn nms_output_is_a_valid_greedy_cover(
        boxes in prop::collection::vec((grid_box(), 0u8..10, prop::option::of(0usize..3)), 1..14),
        thr in prop::collection::vec(0.1f64..0.95, 3),
        bg in 0.1f64..0.95,
    ) {
        let props: Vec<Proposal> = boxes.into_iter().map(|(b, s, c)| Proposal { bbox: b, score: s as f64, class_id: c }).collect();
        let keep = class_aware_nms_indices(&props, &thr, bg).unwrap();
        let t = |i: usize| props[i].class_id.map_or(bg, |c| thr[c]);
        for w in keep.windows(2) {
            prop_assert!(props[w[0]].score >= props[w[1]].score);
        }
        for (pos, &k) in keep.iter().enumerate() {
            for &later in &keep[pos + 1..] {
                prop_assert!(box_iou(&props[k].bbox, &props[later].bbox) <= t(k));
            }
        }
        for i in (0..props.len()).filter(|i| !keep.contains(i)) {
            let earlier = keep.iter().any(|&k| {
                (props[k].score > props[i].score || (props[k].score == props[i].score && k < i))
                    && box_iou(&props[k].bbox, &props[i].bbox) > t(k)
            });
            prop_assert!(earlier, "proposal {} dropped without a suppressor", i);
        }
        let all = class_aware_nms_indices(&props, &[1.0; 3], 1.0).unwrap();
        prop_assert_eq!(all.len(), props.len());
    }

    #[test]
    fn linear_threshold_monotone(cfs in prop::collection::vec(1u64..5000, 2..20)) {
        let cats = categories(&cfs);
        let stats = cats.group_stats();
        let cfg = ResamplingConfig::linear_default();
        for g in Group::ALL {
            let mut members: Vec<_> = cats.iter().filter(|c| c.group == g).collect();
            members.sort_by_key(|c| c.cf);
            let base = match g { Group::Frequent => 0.65, Group::Common => 0.75, Group::Rare => 0.85 };
            let mut prev = f64::MAX;
            for c in members {
                let t = threshold_linear(c.cf, g, &stats, &cfg).unwrap();
                prop_assert!(t <= prev && t >= base - 1e-12 && t <= base + 0.1 + 1e-12);
                prev = t;
            }
        }
    }

    #[test]
    fn turning_a_false_positive_into_a_true_positive_never_lowers_ap(
        flags in prop::collection::vec(any::<bool>(), 1..15),
        pick in any::<prop::sample::Index>(),
        extra_gt in 0usize..4,
    ) {
        let matches: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, &f)| (1.0 - i as f64 * 0.01, f)).collect();
        let n_gt = flags.len() + extra_gt;
        let before = average_precision(&pr_curve(&matches, n_gt).unwrap());
        let mut flipped = matches.clone();
        flipped[pick.index(flags.len())].1 = true;
        let after = average_precision(&pr_curve(&flipped, n_gt).unwrap());
        prop_assert!(after >= before);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn evaluation_ignores_detection_order(
        gts in prop::collection::vec((grid_box(), 0usize..2), 1..4),
        dets in prop::collection::vec((grid_box(), 0usize..2, 0.0f64..1.0), 0..6),
    ) {
        let cats = categories(&[5, 500]);
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(b, c)| GroundTruth { image_id: "i".into(), bbox: b, class_id: c, mask_rle: None }).collect();
        let dets: Vec<Detection> = dets.into_iter().map(|(b, c, s)| Detection { image_id: "i".into(), bbox: b, class_id: c, score: s, mask_rle: None }).collect();
        let mut reversed = dets.clone();
        reversed.reverse();
        let scores: std::collections::BTreeSet<u64> = dets.iter().map(|d| d.score.to_bits()).collect();
        prop_assume!(scores.len() == dets.len());
        let a = evaluate(&dets, &gts, &cats, &EvalParams::default()).unwrap();
        let b = evaluate(&reversed, &gts, &cats, &EvalParams::default()).unwrap();
        prop_assert_eq!(a.ap, b.ap);
        let m = micro_evaluate(&dets, &gts, &cats);
        prop_assert!((a.ap - m.ap).abs() < 1e-12);
    }

    #[test]
    fn kmeans_is_deterministic_and_reports_its_partition(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..25),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let k = k.min(rows.len());
        let table = FeatureTable::from_rows(rows.clone()).unwrap();
        let cfg = KMeansConfig { k, seed, ..Default::default() };
        let a = kmeans(&table, &cfg).unwrap();
        let b = kmeans(&table, &cfg).unwrap();
        prop_assert_eq!(&a.assignments, &b.assignments);
        prop_assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        let sse = partition_sse(&rows, &a.assignments, k);
        prop_assert!((a.objective - sse).abs() <= 1e-9 * (1.0 + sse));
        for c in 0..k {
            prop_assert!(a.assignments.contains(&c));
        }
    }
}

#[test]
fn geometric_channel_golden() {
    let demo = demo_dataset(0).unwrap();
    let tree = build_geometric_tree(&demo.masks, DEFAULT_MASK_GRID, &KMeansConfig::with_k(8)).unwrap();
    let text: String = (0..demo.masks.len())
        .map(|c| format!("{c} {}\n", geo_mask_channel(c, &tree).unwrap()))
        .collect();
    let golden = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/geo_mask_channel.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(golden).unwrap());
    // classes drawn with the same shape and size share a channel
    for c in 0..demo.masks.len() {
        for d in 0..demo.masks.len() {
            if c % 16 == d % 16 {
                assert_eq!(geo_mask_channel(c, &tree).unwrap(), geo_mask_channel(d, &tree).unwrap());
            }
        }
    }
}
