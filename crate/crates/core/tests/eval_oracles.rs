//! Frozen-feature evaluation against brute-force references.

mod common;

use common::*;
use iivcl::eval::{
    cooccurrence_probability, few_shot_subset, linear_probe, neighbor_agreement, recall_at_k, stratified_split,
    FrozenFeatures, Split,
};
use rand::Rng;

fn features(r: &mut impl Rng, n: usize, d: usize, classes: u32, split: Split) -> FrozenFeatures {
    let data = gaussian(r, n * d);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    FrozenFeatures::new(d, data, labels, (0..n as u64).collect(), split).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    kdot(a, b) / (kdot(a, a).sqrt() * kdot(b, b).sqrt())
}

/// Double loop: a query hits at `k` when fewer than `k` gallery rows rank
/// strictly ahead of its best same-class row (ties go to lower index).
fn recall_oracle(q: &FrozenFeatures, g: &FrozenFeatures, k: usize) -> f64 {
    let mut hits = 0;
    for i in 0..q.len() {
        let s: Vec<f64> = (0..g.len()).map(|j| cosine(q.row(i), g.row(j))).collect();
        let ahead = |j: usize| (0..g.len()).filter(|&m| s[m] > s[j] || (s[m] == s[j] && m < j)).count();
        let best = (0..g.len())
            .filter(|&j| g.class_ids[j] == q.class_ids[i])
            .map(ahead)
            .min();
        if best.is_some_and(|rank| rank < k) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

#[test]
fn recall_matches_double_loop() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let d = r.random_range(2..8);
        let (nq, ng) = (r.random_range(1..20), r.random_range(5..40));
        let q = features(&mut r, nq, d, 4, Split::Test);
        let g = features(&mut r, ng, d, 4, Split::Train);
        let ks: Vec<usize> = [1, 2, 5].into_iter().filter(|&k| k <= g.len()).collect();
        let got = recall_at_k(&q, &g, &ks).unwrap();
        for (k, v) in ks.iter().zip(&got.recall) {
            assert_eq!(*v, recall_oracle(&q, &g, *k), "seed {seed}, k {k}");
        }
        // recall is monotone in k
        assert!(got.recall.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn neighbor_agreement_matches_brute_force() {
    for seed in 0..30 {
        let mut r = rng(seed + 100);
        let f = features(&mut r, 25, 4, 3, Split::Train);
        let k = 5;
        let mut total = 0.0;
        for i in 0..f.len() {
            let mut others: Vec<(f64, usize)> =
                (0..f.len()).filter(|&j| j != i).map(|j| (cosine(f.row(i), f.row(j)), j)).collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            total += others[..k].iter().filter(|(_, j)| f.class_ids[*j] == f.class_ids[i]).count() as f64 / k as f64;
        }
        let want = total / f.len() as f64;
        assert!((neighbor_agreement(&f, k).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn probe_separates_separable_classes() {
    let mut r = rng(3);
    let classes = 4u32;
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| gaussian(&mut r, 6).iter().map(|v| v * 4.0).collect()).collect();
    let make = |r: &mut rand_chacha::ChaCha8Rng, n: usize, split| {
        let labels: Vec<u32> = (0..n).map(|i| i as u32 % classes).collect();
        let data = labels
            .iter()
            .flat_map(|&c| centers[c as usize].iter().map(|m| m + r.sample::<f64, _>(rand_distr::StandardNormal) * 0.3).collect::<Vec<_>>())
            .collect();
        FrozenFeatures::new(6, data, labels, (0..n as u64).collect(), split).unwrap()
    };
    let (train, test) = (make(&mut r, 80, Split::Train), make(&mut r, 40, Split::Test));
    let res = linear_probe(&train, &test, 200, 1.0).unwrap();
    assert_eq!(res.accuracy, 1.0);
    assert!(res.train_loss.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn probe_on_noise_stays_near_chance() {
    // Labels independent of features: mean accuracy over seeds is 1/K.
    let classes = 8u32;
    let mut accs = Vec::new();
    for seed in 0..40 {
        let mut r = rng(seed + 500);
        let train = features(&mut r, 160, 8, classes, Split::Train);
        let test = features(&mut r, 160, 8, classes, Split::Test);
        accs.push(linear_probe(&train, &test, 100, 1.0).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    // standard error of the mean is about 0.0042 here
    assert!((mean - 1.0 / classes as f64).abs() < 0.02, "mean accuracy {mean}");
}

#[test]
fn few_shot_keeps_floor_of_each_class() {
    let labels: Vec<u32> = (0..64).map(|i| i % 16).collect();
    let f = FrozenFeatures::new(1, (0..64).map(f64::from).collect(), labels, (0..64).collect(), Split::Train).unwrap();
    for (frac, per_class) in [(0.25, 1), (0.5, 2), (0.75, 3), (1.0, 4)] {
        let s = few_shot_subset(&f, frac, 7).unwrap();
        assert_eq!(s.len(), 16 * per_class);
        for c in 0..16 {
            assert_eq!(s.class_ids.iter().filter(|&&x| x == c).count(), per_class);
        }
        // row order preserved
        assert!(s.video_ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(few_shot_subset(&f, frac, 7).unwrap(), s);
    }
    assert!(few_shot_subset(&f, 0.1, 0).is_err());
}

#[test]
fn split_is_stratified_and_disjoint() {
    let labels: Vec<u32> = (0..320).map(|i| i % 16).collect();
    let (train, test) = stratified_split(&labels, 0.2, 42).unwrap();
    assert_eq!((train.len(), test.len()), (256, 64));
    for c in 0..16 {
        assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 4);
    }
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..320).collect::<Vec<_>>());
    assert_eq!(stratified_split(&labels, 0.2, 42).unwrap(), (train, test));
}

#[test]
fn cooccurrence_matches_direct_power() {
    for k in [2u64, 16, 100, 400, 1000] {
        for q in [1u64, 10, 512, 1024, 4096] {
            let want = 1.0 - ((k - 1) as f64 / k as f64).powi(q as i32);
            assert!((cooccurrence_probability(k, q).unwrap() - want).abs() < 1e-12);
        }
    }
    assert_eq!(cooccurrence_probability(400, 0).unwrap(), 0.0);
    assert_eq!(cooccurrence_probability(1, 5).unwrap(), 1.0);
    assert!(cooccurrence_probability(0, 5).is_err());
}
