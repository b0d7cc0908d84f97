use serde::{Deserialize, Serialize};

use super::features::FrozenFeatures;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
}

fn unit_rows(f: &FrozenFeatures) -> Vec<f64> {
    f.data
        .chunks_exact(f.dim)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            // zero rows stay zero and score 0 against everything
            let s = if n > 0.0 { 1.0 / n } else { 0.0 };
            r.iter().map(move |v| v * s)
        })
        .collect()
}

/// Gallery positions ranked by cosine similarity to `q`; ties go to the
/// lower position.
fn ranking(q: &[f64], gallery: &[f64], dim: usize, skip: Option<usize>) -> Vec<usize> {
    let sims: Vec<f64> = gallery
        .chunks_exact(dim)
        .map(|g| g.iter().zip(q).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).filter(|&i| Some(i) != skip).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// For each query, a hit at `k` when any of the `k` most similar gallery rows
/// shares its class.
pub fn recall_at_k(query: &FrozenFeatures, gallery: &FrozenFeatures, ks: &[usize]) -> Result<RetrievalResult> {
    if query.dim != gallery.dim {
        return Err(Error::config("query and gallery widths differ"));
    }
    if gallery.is_empty() {
        return Err(Error::config("retrieval gallery is empty"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.len()) {
        return Err(Error::config(format!(
            "k = {k} is outside 1..={}",
            gallery.len()
        )));
    }
    let (qs, gs) = (unit_rows(query), unit_rows(gallery));
    let mut first_hit = Vec::with_capacity(query.len());
    for (qi, q) in qs.chunks_exact(query.dim).enumerate() {
        let order = ranking(q, &gs, gallery.dim, None);
        first_hit.push(
            order
                .iter()
                .position(|&g| gallery.class_ids[g] == query.class_ids[qi]),
        );
    }
    let recall = ks
        .iter()
        .map(|&k| {
            if query.is_empty() {
                return 0.0;
            }
            let hits = first_hit.iter().filter(|r| matches!(r, Some(r) if *r < k)).count();
            hits as f64 / query.len() as f64
        })
        .collect();
    Ok(RetrievalResult {
        ks: ks.to_vec(),
        recall,
    })
}

/// Mean fraction of each row's `k` nearest other rows that share its class.
pub fn neighbor_agreement(f: &FrozenFeatures, k: usize) -> Result<f64> {
    if k == 0 || f.len() < k + 1 {
        return Err(Error::config(format!(
            "neighbor agreement at k = {k} needs at least {} rows, got {}",
            k + 1,
            f.len()
        )));
    }
    let rows = unit_rows(f);
    let mut total = 0.0;
    for (i, q) in rows.chunks_exact(f.dim).enumerate() {
        let order = ranking(q, &rows, f.dim, Some(i));
        let same = order[..k]
            .iter()
            .filter(|&&j| f.class_ids[j] == f.class_ids[i])
            .count();
        total += same as f64 / k as f64;
    }
    Ok(total / f.len() as f64)
}

/// Chance that a queue of `q` uniformly drawn samples holds at least one
/// of a given class among `k` equally likely classes: `1 - ((k-1)/k)^q`.
pub fn cooccurrence_probability(k: u64, q: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("class count must be positive"));
    }
    if q == 0 {
        return Ok(0.0);
    }
    if k == 1 {
        return Ok(1.0);
    }
    Ok(-(q as f64 * (-1.0 / k as f64).ln_1p()).exp_m1())
}
