//! Loss values against the direct-formula oracle, one error per instance.

use iivcl::loss::{info_nce, intra_loss, nn_loss};
use iivcl::queue::{EmbeddingQueue, QueueEntry};
use iivcl::tensor::{Tape, Tensor};
use rand::Rng;

use super::*;

pub const INSTANCES: u64 = 100;
pub const TOL: f64 = 1e-6;
pub const TAU: f64 = 0.1;

pub fn queue_of(vs: &[Vec<f64>]) -> EmbeddingQueue<f64> {
    let d = vs.first().map_or(4, Vec::len);
    let mut q = EmbeddingQueue::new(vs.len().max(1), d).unwrap();
    if !vs.is_empty() {
        q.enqueue_batch(vs.iter().enumerate().map(|(i, v)| QueueEntry::new(v.clone(), i as u64)).collect())
            .unwrap();
    }
    q
}

/// Query, positive and up to 8 negatives.
pub fn instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let d = r.random_range(2..17);
    let n = r.random_range(0..9);
    (unit(&mut r, d), unit(&mut r, d), (0..n).map(|_| unit(&mut r, d)).collect())
}

fn err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        rel_err(got, want)
    }
}

pub fn info_nce_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let (q, k, negs) = instance(seed);
            let mut tape = Tape::new();
            let qv = tape.constant(Tensor::vector(q.clone()));
            let kv = tape.constant(Tensor::vector(k.clone()));
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let l = info_nce(&mut tape, qv, kv, &refs, TAU).unwrap();
            err(tape.value(l).item(), info_nce_oracle(&q, &k, &negs, TAU))
        })
        .collect()
}

pub fn intra_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let (z1, z2, negs) = instance(seed + 1000);
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(z1.clone()));
            let b = tape.constant(Tensor::vector(z2.clone()));
            let l = intra_loss(&mut tape, a, b, &queue_of(&negs), TAU).unwrap();
            err(tape.value(l).item(), info_nce_oracle(&z1, &z2, &negs, TAU))
        })
        .collect()
}

/// The oracle mines the neighbor itself and drops it from the negatives,
/// so a wrong index shows up as a large value error.
pub fn nn_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(seed + 2000);
            let d = r.random_range(2..17);
            let n = r.random_range(1..10);
            let (z1, z2) = (unit(&mut r, d), unit(&mut r, d));
            let bank: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();

            let j = nn_oracle(&z2, &bank);
            let negs: Vec<Vec<f64>> =
                bank.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, v)| v.clone()).collect();
            let want = info_nce_oracle(&z1, &bank[j], &negs, TAU);

            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::vector(z1), true);
            let b = tape.constant(Tensor::vector(z2));
            let out = nn_loss(&mut tape, a, b, &queue_of(&bank), TAU, 1).unwrap();
            if out.nn_index != Some(j) {
                return f64::INFINITY;
            }
            err(tape.value(out.loss).item(), want)
        })
        .collect()
}
