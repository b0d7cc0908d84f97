//! InfoNCE and the intra-video / nearest-neighbor objectives built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queue::EmbeddingQueue;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_intra: f64,
    pub lambda_nn: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_intra: 1.0,
            lambda_nn: 1.0,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_intra: f64, lambda_nn: f64, temperature: f64) -> Result<Self> {
        let w = Self {
            lambda_intra,
            lambda_nn,
            temperature,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda_intra >= 0.0 && self.lambda_nn >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.lambda_intra == 0.0 && self.lambda_nn == 0.0 {
            return Err(Error::config("lambda_intra and lambda_nn cannot both be zero"));
        }
        Ok(())
    }
}

/// Scalar summary of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub intra_term: f64,
    pub nn_term: f64,
    /// Weighted loss with view 1 as query and view 2 as key.
    pub forward_dir: f64,
    /// Weighted loss with view 2 as query and view 1 as key.
    pub backward_dir: f64,
}

impl LossBreakdown {
    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.total += b.total;
            acc.intra_term += b.intra_term;
            acc.nn_term += b.nn_term;
            acc.forward_dir += b.forward_dir;
            acc.backward_dir += b.backward_dir;
        }
        acc.total /= n;
        acc.intra_term /= n;
        acc.nn_term /= n;
        acc.forward_dir /= n;
        acc.backward_dir /= n;
        acc
    }
}

/// InfoNCE of `q` against `k_pos` with explicit negatives.
///
/// An empty negative set yields exactly zero.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k_pos: Var,
    negatives: &[&[T]],
    tau: f64,
) -> Result<Var> {
    let negs = if negatives.is_empty() {
        None
    } else {
        let d = tape.value(q).numel();
        let data: Vec<T> = negatives.iter().flat_map(|n| n.iter().copied()).collect();
        Some(tape.constant(Tensor::new(&[negatives.len(), d], data)?))
    };
    tape.info_nce(q, k_pos, negs, tau)
}

/// Intra-video loss: the positive is the other view's key, every queue entry
/// is a negative.
pub fn intra_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    q_intra: &EmbeddingQueue<T>,
    tau: f64,
) -> Result<Var> {
    let negs = match q_intra.matrix() {
        Some(m) => Some(tape.constant(Tensor::new(&[q_intra.len(), q_intra.dim()], m)?)),
        None => None,
    };
    tape.info_nce(z1, z2, negs, tau)
}

#[derive(Clone, Copy, Debug)]
pub struct NnLoss {
    pub loss: Var,
    /// Queue index of the mined positive; `None` while the pool gate is shut.
    pub nn_index: Option<usize>,
}

/// Nearest-neighbor loss: the positive for `z1` is the queue entry closest to
/// `z2`, and the remaining entries are negatives.
///
/// Returns a constant zero while the queue holds fewer than `min_pool`
/// entries. The mined positive is a constant, so no gradient reaches the
/// queue.
pub fn nn_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    q_nn: &EmbeddingQueue<T>,
    tau: f64,
    min_pool: usize,
) -> Result<NnLoss> {
    if q_nn.is_empty() || q_nn.len() < min_pool {
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        return Ok(NnLoss {
            loss: tape.constant(Tensor::scalar(T::zero())),
            nn_index: None,
        });
    }
    let (idx, nn) = q_nn.nearest_neighbor(tape.value(z2).data())?;
    let positive = tape.constant(Tensor::vector(nn.embedding.clone()));
    let negatives: Vec<&[T]> = q_nn
        .negatives_excluding(idx)?
        .into_iter()
        .map(|e| e.embedding.as_slice())
        .collect();
    let loss = info_nce(tape, z1, positive, &negatives, tau)?;
    Ok(NnLoss {
        loss,
        nn_index: Some(idx),
    })
}

/// The eight embeddings of one clip pair: `{intra, nn}` heads ×
/// `{view 1, view 2}` × `{query, key}`.
#[derive(Clone, Copy, Debug)]
pub struct PairEmbeddings {
    pub intra_1q: Var,
    pub intra_2k: Var,
    pub intra_2q: Var,
    pub intra_1k: Var,
    /// `None` when the nearest-neighbor path is compiled out of the step.
    pub nn: Option<NnEmbeddings>,
}

#[derive(Clone, Copy, Debug)]
pub struct NnEmbeddings {
    pub nn_1q: Var,
    pub nn_2k: Var,
    pub nn_2q: Var,
    pub nn_1k: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Mined queue indices for the (1→2, 2→1) directions.
    pub nn_indices: [Option<usize>; 2],
}

/// Symmetrized, weighted sum of the intra-video and nearest-neighbor losses.
///
/// Each term averages its two directions.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: &PairEmbeddings,
    q_intra: &EmbeddingQueue<T>,
    q_nn: &EmbeddingQueue<T>,
    weights: &LossWeights,
    min_nn_pool: usize,
) -> Result<CombinedLoss> {
    weights.validate()?;
    let tau = weights.temperature;
    let half = T::of(0.5);

    let i12 = intra_loss(tape, z.intra_1q, z.intra_2k, q_intra, tau)?;
    let i21 = intra_loss(tape, z.intra_2q, z.intra_1k, q_intra, tau)?;
    let intra_sum = tape.add(i12, i21)?;
    let intra_term = tape.scale(intra_sum, half);
    let weighted_intra = tape.scale(intra_term, T::of(weights.lambda_intra));

    let v = |tape: &Tape<T>, x: Var| tape.value(x).item().as_f64();
    let (li12, li21) = (v(tape, i12), v(tape, i21));

    let (total, nn_term_v, ln12, ln21, nn_indices) = match z.nn {
        Some(nn) => {
            let a = nn_loss(tape, nn.nn_1q, nn.nn_2k, q_nn, tau, min_nn_pool)?;
            let b = nn_loss(tape, nn.nn_2q, nn.nn_1k, q_nn, tau, min_nn_pool)?;
            let nn_sum = tape.add(a.loss, b.loss)?;
            let nn_term = tape.scale(nn_sum, half);
            let weighted_nn = tape.scale(nn_term, T::of(weights.lambda_nn));
            let total = tape.add(weighted_intra, weighted_nn)?;
            (
                total,
                v(tape, nn_term),
                v(tape, a.loss),
                v(tape, b.loss),
                [a.nn_index, b.nn_index],
            )
        }
        None => (weighted_intra, 0.0, 0.0, 0.0, [None, None]),
    };

    let (li, ln) = (weights.lambda_intra, weights.lambda_nn);
    let breakdown = LossBreakdown {
        total: v(tape, total),
        intra_term: v(tape, intra_term),
        nn_term: nn_term_v,
        forward_dir: li * li12 + ln * ln12,
        backward_dir: li * li21 + ln * ln21,
    };
    Ok(CombinedLoss {
        total,
        breakdown,
        nn_indices,
    })
}
