//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod losses;

use std::collections::VecDeque;
use std::path::PathBuf;

use iivcl::data::generate_dataset;
use iivcl::queue::{EmbeddingQueue, QueueEntry};
use iivcl::train::{batch_for_step, Config, NoLabels, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit vector orthogonal to `to` (Gram-Schmidt against a random draw).
pub fn orthogonal_unit(rng: &mut impl Rng, to: &[f64]) -> Vec<f64> {
    let mut v = gaussian(rng, to.len());
    let p: f64 = v.iter().zip(to).map(|(a, b)| a * b).sum();
    for (x, t) in v.iter_mut().zip(to) {
        *x -= p * t;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Neumaier-compensated sum.
pub fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn kdot(a: &[f64], b: &[f64]) -> f64 {
    ksum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// InfoNCE from the textbook formula: no max shift, compensated sums,
/// `-log(e^{s+} / (e^{s+} + Σ e^{s_i}))`.
pub fn info_nce_oracle(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let num = (kdot(q, pos) / tau).exp();
    let den = ksum(std::iter::once(num).chain(negs.iter().map(|n| (kdot(q, n) / tau).exp())));
    -(num / den).ln()
}

/// Brute-force nearest neighbor: first index of the maximal dot product.
pub fn nn_oracle(x: &[f64], bank: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for (i, b) in bank.iter().enumerate() {
        let s = kdot(x, b);
        if s > best_s {
            best = i;
            best_s = s;
        }
    }
    best
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over whole gradient vectors.
///
/// Elementwise ratios blow up on coordinates whose true derivative is
/// near zero, where central differences only resolve O(ε²) noise.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| ksum(v.iter().map(|x| x * x)).sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

pub const FD_EPS: f64 = 1e-3;

/// Central differences of `f` at `x`, every coordinate.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + FD_EPS;
            let up = f(&xp);
            xp[i] = orig - FD_EPS;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn reference_config() -> Config {
    Config::load(&repo_root().join("configs/reference.conf")).expect("reference config parses")
}

/// Small but complete run: 32 videos of 16 classes, 3 epochs.
pub fn small_config() -> Config {
    Config {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        n_videos: 32,
        queue_capacity: 32,
        min_nn_pool: 8,
        conv_channels: vec![4, 8],
        conv_strides: vec![1, 2],
        head_dims: vec![16, 8],
        ..Config::default()
    }
}

pub fn entry(r: &mut impl Rng, d: usize, id: u64) -> QueueEntry<f64> {
    QueueEntry::new(unit(r, d), id)
}

/// Queue contents after random batches, alongside a `VecDeque` model.
pub fn random_history(seed: u64) -> (EmbeddingQueue<f64>, VecDeque<QueueEntry<f64>>) {
    let mut r = rng(seed);
    let d = r.random_range(1..6);
    let cap = r.random_range(1..20);
    let mut q = EmbeddingQueue::new(cap, d).unwrap();
    let mut model = VecDeque::new();
    let mut id = 0;
    for _ in 0..r.random_range(0..8) {
        let n = r.random_range(0..=cap);
        let batch: Vec<_> = (0..n)
            .map(|_| {
                id += 1;
                entry(&mut r, d, id)
            })
            .collect();
        model.extend(batch.iter().cloned());
        while model.len() > cap {
            model.pop_front();
        }
        q.enqueue_batch(batch).unwrap();
    }
    (q, model)
}

/// Largest gradient-norm difference between a λ_nn = 0 run and a run with
/// the NN path removed, over every step of a short training run.
pub fn baseline_gradient_gap() -> f64 {
    let base = Config {
        epochs: 2,
        warmup_epochs: 0,
        ..small_config()
    };
    let zero_weight = Config { lambda_nn: 0.0, ..base.clone() };
    let removed = Config { nn_path: false, ..zero_weight.clone() };
    let videos = generate_dataset(base.data_seed, base.n_videos, base.n_classes).unwrap();
    let mut a = TrainState::<f32>::new(zero_weight.clone()).unwrap();
    let mut b = TrainState::<f32>::new(removed).unwrap();
    let mut worst: f64 = 0.0;
    let mut nn_seen = false;
    for step in 0..zero_weight.total_steps() as u64 {
        let batch = batch_for_step::<f32>(&zero_weight, &videos, step).unwrap();
        let (ga, gb) = (a.loss_and_gradients(&batch).unwrap(), b.loss_and_gradients(&batch).unwrap());
        nn_seen |= ga.loss.nn_term > 0.0;
        let diff: f64 = ga
            .grads
            .iter()
            .zip(&gb.grads)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff);
        a.train_step(&batch, &NoLabels).unwrap();
        b.train_step(&batch, &NoLabels).unwrap();
    }
    assert!(nn_seen, "the NN loss never activated, so the comparison is vacuous");
    worst
}

/// Queue holding two copies of one vector among strictly less similar
/// ones; returns it with the query and the older copy's index.
pub fn tie_case(seed: u64) -> (EmbeddingQueue<f64>, Vec<f64>, usize) {
    let mut r = rng(seed + 3_000_000);
    let d = r.random_range(2..6);
    let n = r.random_range(2..12);
    let dup = unit(&mut r, d);
    let a = r.random_range(0..n);
    let mut b = r.random_range(0..n);
    while b == a {
        b = r.random_range(0..n);
    }
    let mut q = EmbeddingQueue::new(n, d).unwrap();
    let batch = (0..n)
        .map(|i| {
            if i == a || i == b {
                QueueEntry::new(dup.clone(), i as u64)
            } else {
                QueueEntry::new(orthogonal_unit(&mut r, &dup), i as u64)
            }
        })
        .collect();
    q.enqueue_batch(batch).unwrap();
    (q, dup, a.min(b))
}
