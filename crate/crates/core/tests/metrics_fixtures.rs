use std::collections::HashMap;

use mmseq::geo::{Node, Segment};
use mmseq::metrics::{acc1, acc2, bleu, evaluate_dataset, jaccard};
use mmseq::{Point, RoadGraph};
use proptest::prelude::*;

const EPS: f64 = 1e-9;

/// Nodes along the x axis at the given positions, one segment between each
/// consecutive pair.
fn line(xs: &[f64]) -> RoadGraph {
    let nodes = xs.iter().enumerate().map(|(id, &x)| Node { id, pos: Point::new(x, 0.0) }).collect();
    let segs = (0..xs.len() - 1)
        .map(|i| Segment { id: i, from: i, to: i + 1, length: xs[i + 1] - xs[i] })
        .collect();
    RoadGraph::build(nodes, segs).unwrap()
}

/// Straight re-derivation of sentence BLEU: clipped precisions, uniform
/// weights over 1..=min(4, |pred|, |truth|), brevity penalty.
fn bleu_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n_max = 4.min(pred.len()).min(truth.len());
    let mut prod = 1.0;
    for n in 1..=n_max {
        let mut refc: HashMap<Vec<usize>, usize> = HashMap::new();
        for i in 0..=truth.len() - n {
            *refc.entry(truth[i..i + n].to_vec()).or_default() += 1;
        }
        let mut hits = 0;
        for i in 0..=pred.len() - n {
            let g = pred[i..i + n].to_vec();
            if let Some(c) = refc.get_mut(&g) {
                if *c > 0 {
                    *c -= 1;
                    hits += 1;
                }
            }
        }
        prod *= hits as f64 / (pred.len() - n + 1) as f64;
    }
    let bp = if pred.len() > truth.len() { 1.0 } else { (1.0 - truth.len() as f64 / pred.len() as f64).exp() };
    bp * prod.powf(1.0 / n_max as f64)
}

#[test]
fn accuracy_fixtures() {
    // a, b, c, d, e = 0..5
    assert!((acc1(&[0, 1, 2], &[1, 2, 3, 4]).unwrap() - 0.5).abs() < EPS);
    assert_eq!(acc1(&[0, 1], &[2, 3]).unwrap(), 0.0);
    assert!(acc1(&[0], &[]).is_err());
    let g = line(&[0.0, 100.0, 200.0, 300.0, 400.0, 500.0]);
    assert!((acc2(&[3, 4], &[0, 1, 2, 3], &g).unwrap() - 0.25).abs() < EPS);
    assert!((acc2(&[0, 2], &[0, 1, 2, 3], &g).unwrap() - acc1(&[0, 2], &[0, 1, 2, 3]).unwrap()).abs() < EPS);
    let uneven = line(&[0.0, 100.0, 300.0, 600.0]);
    assert!((acc2(&[2], &[0, 1, 2], &uneven).unwrap() - 0.5).abs() < EPS);
    assert!(acc2(&[0], &[], &uneven).is_err());
}

#[test]
fn jaccard_fixtures() {
    assert!((jaccard(&[0, 1, 2], &[1, 2, 3]) - 0.5).abs() < EPS);
    assert_eq!(jaccard(&[0, 1], &[2, 3]), 0.0);
    assert_eq!(jaccard(&[], &[]), 1.0);
}

#[test]
fn bleu_fixtures() {
    let b = bleu(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 5], 4);
    assert!((b - 0.2f64.powf(0.25)).abs() < EPS);
    assert!((b - 0.668_740_304_976_422).abs() < EPS);
    assert!((b - bleu_oracle(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 5])).abs() < EPS);
    let truth: Vec<usize> = (0..10).collect();
    let b = bleu(&truth[..5], &truth, 4);
    assert!((b - (-1.0f64).exp()).abs() < EPS);
    assert_eq!(bleu(&[], &truth, 4), 0.0);
}

#[test]
fn identity_scores_one_on_all_four() {
    let g = line(&[0.0, 50.0, 170.0, 200.0]);
    for route in [vec![0], vec![0, 1], vec![0, 1, 2]] {
        assert_eq!(acc1(&route, &route).unwrap(), 1.0);
        assert_eq!(acc2(&route, &route, &g).unwrap(), 1.0);
        assert_eq!(jaccard(&route, &route), 1.0);
        assert_eq!(bleu(&route, &route, 4), 1.0);
    }
}

#[test]
fn dataset_aggregation() {
    let g = line(&[0.0, 100.0, 200.0, 300.0, 400.0]);
    let labels = vec![(1, vec![0, 1]), (2, vec![1, 2, 3]), (3, vec![2]), (4, vec![3])];
    let r = evaluate_dataset(&labels, &labels, &g).unwrap();
    assert_eq!((r.acc1, r.acc2, r.jaccard, r.bleu), (1.0, 1.0, 1.0, 1.0));
    let half: Vec<(u64, Vec<usize>)> =
        labels.iter().map(|(id, r)| (*id, if id % 2 == 0 { r.clone() } else { Vec::new() })).collect();
    let r = evaluate_dataset(&half, &labels, &g).unwrap();
    assert!((r.acc1 - 0.5).abs() < EPS);
    let mut shuffled = labels.clone();
    shuffled.reverse();
    let a = evaluate_dataset(&shuffled, &labels, &g).unwrap();
    let b = evaluate_dataset(&labels, &labels, &g).unwrap();
    assert_eq!(a.key_values(), b.key_values());
    assert_eq!(a.per_traj_csv(), b.per_traj_csv());
    let err = evaluate_dataset(&labels[..3], &labels, &g).unwrap_err().to_string();
    assert!(err.contains('4'), "{err}");
}

proptest! {
    #[test]
    fn bleu_agrees_with_oracle(pred in prop::collection::vec(0usize..5, 1..12), truth in prop::collection::vec(0usize..5, 1..12)) {
        let b = bleu(&pred, &truth, 4);
        prop_assert!((b - bleu_oracle(&pred, &truth)).abs() < EPS);
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn set_metrics_bounded(pred in prop::collection::vec(0usize..8, 0..10), truth in prop::collection::vec(0usize..8, 1..10)) {
        let a = acc1(&pred, &truth).unwrap();
        let j = jaccard(&pred, &truth);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(j <= a + EPS);
    }
}
