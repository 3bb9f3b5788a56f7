mod common;

use std::collections::BTreeMap;

use kgpath::eval::{assemble_report, hits_at_1, tail_signatures, EvalRecord};
use kgpath::graph::Signature;
use kgpath::training::{
    compute_weights, contrastive_loss, weighted_contrastive_loss, weighted_loss_with_grad,
    OccurrenceCounts, PathClass, WeightBounds,
};
use proptest::prelude::*;

fn counts_strategy() -> impl Strategy<Value = BTreeMap<String, usize>> {
    prop::collection::btree_map("[a-f]{1,3}", 1usize..100, 1..15)
}

fn to_counts(pos: &BTreeMap<String, usize>, neg: &BTreeMap<String, usize>) -> OccurrenceCounts {
    let conv = |m: &BTreeMap<String, usize>| {
        m.iter()
            .map(|(k, v)| (Signature(vec![k.clone()]), *v))
            .collect()
    };
    OccurrenceCounts {
        positive: conv(pos),
        negative: conv(neg),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn weights_lie_in_bounds_and_fall_with_frequency(pos in counts_strategy(), neg in counts_strategy()) {
        let counts = to_counts(&pos, &neg);
        let b = WeightBounds::default();
        let w = compute_weights(&counts, b).unwrap();
        for (class, map) in [(PathClass::Positive, &counts.positive), (PathClass::Negative, &counts.negative)] {
            for (sa, na) in map {
                let wa = w.get(class, sa);
                prop_assert!((b.w_min..=b.w_max).contains(&wa));
                for (sb, nb) in map {
                    if na < nb {
                        prop_assert!(wa >= w.get(class, sb));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_counts_give_neutral_weight(n in 1usize..50, k in 1usize..10) {
        let pos: BTreeMap<String, usize> = (0..k).map(|i| (format!("r{i}"), n)).collect();
        let counts = to_counts(&pos, &BTreeMap::new());
        let w = compute_weights(&counts, WeightBounds::default()).unwrap();
        for s in counts.positive.keys() {
            prop_assert_eq!(w.get(PathClass::Positive, s), 1.0);
        }
    }

    #[test]
    fn loss_is_invariant_to_common_weight_scale(
        s_pos in -8.0f64..8.0,
        w_pos in 0.5f64..3.0,
        negs in prop::collection::vec((-8.0f64..8.0, 0.5f64..3.0), 1..10),
        c in 0.1f64..10.0,
    ) {
        let scaled: Vec<(f64, f64)> = negs.iter().map(|(s, w)| (*s, w * c)).collect();
        let a = weighted_contrastive_loss(s_pos, w_pos, &negs).unwrap();
        let b = weighted_contrastive_loss(s_pos, w_pos * c, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences(
        s_pos in -5.0f64..5.0,
        w_pos in 0.5f64..3.0,
        negs in prop::collection::vec((-5.0f64..5.0, 0.5f64..3.0), 1..8),
    ) {
        let (loss, d_pos, d_negs) = weighted_loss_with_grad(s_pos, w_pos, &negs).unwrap();
        prop_assert!((loss - weighted_contrastive_loss(s_pos, w_pos, &negs).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        let fd = (weighted_contrastive_loss(s_pos + h, w_pos, &negs).unwrap()
            - weighted_contrastive_loss(s_pos - h, w_pos, &negs).unwrap()) / (2.0 * h);
        prop_assert!((fd - d_pos).abs() < 1e-6);
        // softmax gradients sum to zero
        prop_assert!((d_pos + d_negs.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn union_obeys_inclusion_exclusion(flags in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..40)) {
        let records: Vec<EvalRecord> = flags
            .iter()
            .enumerate()
            .map(|(i, (ok, _, _))| {
                let p = if *ok { "x" } else { "y" };
                EvalRecord::new(&format!("q{i}"), "q", vec![p.into()], vec!["x".into()], "t [SEP] r", 0.0)
            })
            .collect();
        let shortcut: Vec<bool> = flags.iter().map(|f| f.1).collect();
        let tail: Vec<bool> = flags.iter().map(|f| f.2).collect();
        let hits = hits_at_1(&records).unwrap();
        let r = assemble_report(&records, &shortcut, &tail, hits);
        prop_assert_eq!(r.error, 100.0 - hits);
        if let Some(e) = r.errors {
            prop_assert!(e.union.of_all + 1e-9 >= e.shortcut.of_all.max(e.long_tail.of_all));
            prop_assert!(e.union.of_all <= e.shortcut.of_all + e.long_tail.of_all + 1e-9);
            prop_assert!(e.union.of_errors <= 100.0 + 1e-9);
        }
    }
}

#[test]
fn loss_falls_monotonically_as_positive_rises() {
    let negs = [0.3, -1.2, 2.0];
    let losses: Vec<f64> = (0..60)
        .map(|i| contrastive_loss(-3.0 + 0.2 * i as f64, &negs))
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]));
    let weighted: Vec<f64> = (1..40)
        .map(|i| weighted_contrastive_loss(0.0, 0.1 * i as f64, &[(0.0, 1.0), (0.5, 2.0)]).unwrap())
        .collect();
    assert!(weighted.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn empty_negatives_cost_nothing() {
    assert_eq!(contrastive_loss(1.0, &[]), 0.0);
    assert_eq!(weighted_contrastive_loss(1.0, 2.0, &[]).unwrap(), 0.0);
    assert!(weighted_contrastive_loss(1.0, 0.0, &[(0.0, 1.0)]).is_err());
}

#[test]
fn tail_is_the_least_frequent_fifth() {
    let counts: BTreeMap<Signature, usize> = (0..10)
        .map(|i| (Signature(vec![format!("r{i}")]), 10 - i))
        .collect();
    let tail = tail_signatures(&counts, 0.2).unwrap();
    let names: Vec<&str> = tail.iter().map(|s| s.0[0].as_str()).collect();
    assert_eq!(names, ["r8", "r9"]);
    let tallied = common::tally(counts.values().copied());
    assert_eq!(tallied.len(), 10);
}
