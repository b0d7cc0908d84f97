//! One optimization step and the epoch loop around it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{Config, TrainMode};
use super::metrics::{metrics_csv, read_metrics, MetricRow};
use super::optim::Sgd;
use super::schedule::lr_schedule;
use crate::data::{generate_dataset, sample_clip_pair, ClipPair, SyntheticVideo};
use crate::encoder::{anneal_momentum, Branch, EncoderPair};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossBreakdown, NnEmbeddings, PairEmbeddings};
use crate::queue::{EmbeddingQueue, QueueEntry};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1 << 56;
const STREAM_SAMPLE: u64 = 2 << 56;

/// Class lookup used for analysis metrics only; never reaches the loss.
pub trait LabelOracle: Sync {
    fn class_of(&self, video_id: u64) -> Option<u32>;
}

/// Oracle that knows no labels.
pub struct NoLabels;

impl LabelOracle for NoLabels {
    fn class_of(&self, _: u64) -> Option<u32> {
        None
    }
}

impl LabelOracle for HashMap<u64, u32> {
    fn class_of(&self, video_id: u64) -> Option<u32> {
        self.get(&video_id).copied()
    }
}

/// Loss, parameter gradients, key embeddings and mined neighbor indices.
type SampleOutput<T> = (LossBreakdown, Vec<Tensor<T>>, KeyEmbeddings<T>, [Option<usize>; 2]);

/// Everything that evolves during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: Config,
    pub pair: EncoderPair<T>,
    pub q_intra: EmbeddingQueue<T>,
    pub q_nn: EmbeddingQueue<T>,
    pub optimizer: Sgd<T>,
    /// Completed optimization steps.
    pub step: u64,
}

/// Key-side embeddings of one clip pair, as enqueued.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyEmbeddings<T> {
    pub intra_1: Vec<T>,
    pub intra_2: Vec<T>,
    pub nn_1: Option<Vec<T>>,
    pub nn_2: Option<Vec<T>>,
}

/// Loss, parameter gradients and side products of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub loss: LossBreakdown,
    pub per_sample: Vec<LossBreakdown>,
    /// Gradients of the batch-mean loss w.r.t. query parameters, in
    /// `ParamSet` order.
    pub grads: Vec<Tensor<T>>,
    pub keys: Vec<KeyEmbeddings<T>>,
    pub nn_indices: Vec<[Option<usize>; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossBreakdown,
    pub qintra_len: usize,
    pub qnn_len: usize,
    pub nn_same_class: Option<f64>,
}

impl StepReport {
    pub fn metric_row(&self) -> MetricRow {
        MetricRow {
            step: self.step,
            epoch: self.epoch,
            lr: self.lr,
            m: self.momentum,
            loss_total: self.loss.total,
            loss_intra: self.loss.intra_term,
            loss_nn: self.loss.nn_term,
            qintra_len: self.qintra_len,
            qnn_len: self.qnn_len,
            nn_same_class_frac: self.nn_same_class,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let pair = EncoderPair::init(config.encoder_config(), &mut stream_rng(config.seed, STREAM_INIT))?;
        Self::from_parts(config, pair)
    }

    /// Fresh queues and optimizer around an existing encoder pair.
    pub fn from_parts(config: Config, pair: EncoderPair<T>) -> Result<Self> {
        let dim = config.encoder_config().embedding_dim();
        Ok(Self {
            q_intra: EmbeddingQueue::new(config.queue_capacity, dim)?,
            q_nn: EmbeddingQueue::new(config.queue_capacity, dim)?,
            optimizer: Sgd::new(pair.query.params(), config.sgd_momentum, config.weight_decay),
            pair,
            config,
            step: 0,
        })
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.config.steps_per_epoch() as u64 + 1
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(
            step as usize,
            self.config.total_steps(),
            self.config.warmup_steps(),
            self.config.base_lr,
        )
    }

    pub fn momentum_at(&self, step: u64) -> f64 {
        let progress = step as f64 / self.config.total_steps().max(1) as f64;
        anneal_momentum(progress, self.config.momentum_init, self.config.momentum_anneal)
    }

    fn key_embeddings(&self, batch: &[ClipPair<T>]) -> Result<Vec<KeyEmbeddings<T>>> {
        let key = &self.pair.key;
        let nn_path = self.config.nn_path;
        batch
            .par_iter()
            .map(|p| {
                let one = |x: &Tensor<T>| -> Result<(Vec<T>, Option<Vec<T>>)> {
                    if nn_path {
                        let (i, n) = key.embed_both(x)?;
                        Ok((i, Some(n)))
                    } else {
                        Ok((key.embed_value(x, Branch::Intra)?, None))
                    }
                };
                let (intra_1, nn_1) = one(&p.x1)?;
                let (intra_2, nn_2) = one(&p.x2)?;
                Ok(KeyEmbeddings {
                    intra_1,
                    intra_2,
                    nn_1,
                    nn_2,
                })
            })
            .collect()
    }

    /// Forward and backward for one clip pair; gradients are for the loss
    /// scaled by `scale`.
    fn sample_gradients(
        &self,
        pair: &ClipPair<T>,
        keys: Option<&KeyEmbeddings<T>>,
        scale: f64,
    ) -> Result<SampleOutput<T>> {
        let enc = &self.pair.query;
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, true);
        let x1 = tape.constant(pair.x1.clone());
        let x2 = tape.constant(pair.x2.clone());
        let f1 = enc.features(&mut tape, &bound, x1)?;
        let f2 = enc.features(&mut tape, &bound, x2)?;
        let intra_1q = enc.project(&mut tape, &bound, f1, Branch::Intra)?;
        let intra_2q = enc.project(&mut tape, &bound, f2, Branch::Intra)?;
        let nn_q = if self.config.nn_path {
            Some((
                enc.project(&mut tape, &bound, f1, Branch::Nn)?,
                enc.project(&mut tape, &bound, f2, Branch::Nn)?,
            ))
        } else {
            None
        };

        let (intra_1k, intra_2k, nn_k) = match keys {
            Some(k) => {
                let mut c = |v: &Vec<T>| tape.constant(Tensor::vector(v.clone()));
                let nn = match (&k.nn_1, &k.nn_2) {
                    (Some(a), Some(b)) => Some((c(a), c(b))),
                    _ => None,
                };
                (c(&k.intra_1), c(&k.intra_2), nn)
            }
            // Mirrored key encoder: the key embedding is the query embedding
            // with its history cut off.
            None => (
                tape.detach(intra_1q),
                tape.detach(intra_2q),
                nn_q.map(|(a, b)| (tape.detach(a), tape.detach(b))),
            ),
        };

        let z = PairEmbeddings {
            intra_1q,
            intra_2k,
            intra_2q,
            intra_1k,
            nn: match (nn_q, nn_k) {
                (Some((nn_1q, nn_2q)), Some((nn_1k, nn_2k))) => Some(NnEmbeddings {
                    nn_1q,
                    nn_2k,
                    nn_2q,
                    nn_1k,
                }),
                _ => None,
            },
        };
        let out = combined_loss(
            &mut tape,
            &z,
            &self.q_intra,
            &self.q_nn,
            &self.config.loss_weights(),
            self.config.min_nn_pool,
        )?;
        let scaled = tape.scale(out.total, T::of(scale));
        let mut g = tape.backward(scaled)?;
        let grads = bound
            .vars
            .iter()
            .map(|&v| {
                g.take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        let val = |v| tape.value(v).data().to_vec();
        let used_keys = KeyEmbeddings {
            intra_1: val(intra_1k),
            intra_2: val(intra_2k),
            nn_1: nn_k.map(|(a, _)| val(a)),
            nn_2: nn_k.map(|(_, b)| val(b)),
        };
        Ok((out.breakdown, grads, used_keys, out.nn_indices))
    }

    /// Batch-mean loss and its gradient with respect to the query encoder.
    ///
    /// Momentum mode takes keys from the key encoder; non-momentum mode
    /// takes detached query embeddings. Does not mutate the state.
    pub fn loss_and_gradients(&self, batch: &[ClipPair<T>]) -> Result<BatchGradients<T>> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let keys = match self.config.mode {
            TrainMode::Momentum => Some(self.key_embeddings(batch)?),
            TrainMode::NonMomentum => None,
        };
        let scale = 1.0 / batch.len() as f64;
        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.sample_gradients(p, keys.as_ref().map(|k| &k[i]), scale))
            .collect::<Result<_>>()?;

        let mut grads: Vec<Tensor<T>> = self
            .pair
            .query
            .params()
            .tensors()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut used = Vec::with_capacity(batch.len());
        let mut nn_indices = Vec::with_capacity(batch.len());
        for (b, g, k, nn) in results {
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
            per_sample.push(b);
            used.push(k);
            nn_indices.push(nn);
        }
        Ok(BatchGradients {
            loss: LossBreakdown::mean(&per_sample),
            per_sample,
            grads,
            keys: used,
            nn_indices,
        })
    }

    fn nn_same_class(
        &self,
        batch: &[ClipPair<T>],
        nn_indices: &[[Option<usize>; 2]],
        labels: &dyn LabelOracle,
    ) -> Option<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for (p, idx) in batch.iter().zip(nn_indices) {
            let Some(class) = labels.class_of(p.video_id) else { continue };
            for i in idx.iter().flatten() {
                let Some(e) = self.q_nn.get(*i) else { continue };
                if e.video_id == p.video_id {
                    continue;
                }
                total += 1;
                if e.class_id == Some(class) {
                    hits += 1;
                }
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    fn non_finite(&self, bg: &BatchGradients<T>, lr: f64) -> Error {
        let mut detail = String::new();
        for (i, b) in bg.per_sample.iter().enumerate() {
            if !b.total.is_finite() {
                detail.push_str(&format!(
                    "sample {i}: total {} intra {} nn {}; ",
                    b.total, b.intra_term, b.nn_term
                ));
            }
        }
        if let Some(k) = bg.keys.first() {
            let logits: Vec<f64> = self
                .q_intra
                .entries()
                .take(8)
                .map(|e| {
                    e.embedding
                        .iter()
                        .zip(&k.intra_2)
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum::<f64>()
                        / self.config.temperature
                })
                .collect();
            detail.push_str(&format!("first key vs queue logits {logits:?}"));
        }
        Error::NonFinite {
            step: self.step,
            lr,
            detail,
        }
    }

    /// One step in the configured mode.
    pub fn train_step(
        &mut self,
        batch: &[ClipPair<T>],
        labels: &dyn LabelOracle,
    ) -> Result<StepReport> {
        let lr = self.lr_at(self.step);
        let m = match self.config.mode {
            TrainMode::Momentum => self.momentum_at(self.step),
            TrainMode::NonMomentum => 0.0,
        };
        let bg = self.loss_and_gradients(batch)?;
        if !bg.loss.total.is_finite() || bg.grads.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(&bg, lr));
        }
        let nn_same_class = self.nn_same_class(batch, &bg.nn_indices, labels);

        self.optimizer.step(self.pair.query.params_mut(), &bg.grads, lr)?;
        match self.config.mode {
            TrainMode::Momentum => self.pair.momentum_update(m)?,
            TrainMode::NonMomentum => self.pair.sync_key(),
        }

        let entry = |v: &Vec<T>, p: &ClipPair<T>| {
            let e = QueueEntry::new(v.clone(), p.video_id);
            match labels.class_of(p.video_id) {
                Some(c) => e.with_class(c),
                None => e,
            }
        };
        self.q_intra.enqueue_batch(
            bg.keys
                .iter()
                .zip(batch)
                .map(|(k, p)| entry(&k.intra_2, p))
                .collect(),
        )?;
        if self.config.nn_path {
            self.q_nn.enqueue_batch(
                bg.keys
                    .iter()
                    .zip(batch)
                    .filter_map(|(k, p)| k.nn_2.as_ref().map(|v| entry(v, p)))
                    .collect(),
            )?;
        }

        let report = StepReport {
            step: self.step,
            epoch: self.epoch_of(self.step),
            lr,
            momentum: m,
            loss: bg.loss,
            qintra_len: self.q_intra.len(),
            qnn_len: self.q_nn.len(),
            nn_same_class,
        };
        self.step += 1;
        Ok(report)
    }

    /// Momentum-encoder step; errors unless the mode is momentum.
    pub fn train_step_momentum(
        &mut self,
        batch: &[ClipPair<T>],
        labels: &dyn LabelOracle,
    ) -> Result<StepReport> {
        if self.config.mode != TrainMode::Momentum {
            return Err(Error::contract("train_step_momentum requires mode = momentum"));
        }
        self.train_step(batch, labels)
    }

    /// Mirrored-key step; errors unless the mode is non-momentum.
    pub fn train_step_non_momentum(
        &mut self,
        batch: &[ClipPair<T>],
        labels: &dyn LabelOracle,
    ) -> Result<StepReport> {
        if self.config.mode != TrainMode::NonMomentum {
            return Err(Error::contract(
                "train_step_non_momentum requires mode = non_momentum",
            ));
        }
        self.train_step(batch, labels)
    }
}

/// Clip pairs for global step `step`; a pure function of
/// `(config.seed, step)` and the corpus.
pub fn batch_for_step<T: Scalar>(
    config: &Config,
    videos: &[SyntheticVideo],
    step: u64,
) -> Result<Vec<ClipPair<T>>> {
    let spe = config.steps_per_epoch() as u64;
    let epoch = step / spe;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE | epoch));
    let start = (step % spe) as usize * config.batch_size;
    let clip_cfg = config.clip_config();
    order[start..start + config.batch_size]
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut rng = stream_rng(
                config.seed,
                STREAM_SAMPLE | (step * config.batch_size as u64 + i as u64),
            );
            sample_clip_pair(&videos[v], &clip_cfg, &mut rng)
        })
        .collect()
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn label_map(videos: &[SyntheticVideo]) -> HashMap<u64, u32> {
    videos.iter().map(|v| (v.video_id, v.class_id)).collect()
}

/// Full pretraining run writing metrics and checkpoints into `out_dir`.
///
/// When resuming, metric rows already in `out_dir` from before the
/// checkpoint's step are kept and the rest are regenerated.
pub fn run_pretraining<T: Scalar>(
    config: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state: TrainState<T> = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.config != *config {
                return Err(Error::config(format!(
                    "checkpoint {} was written with a different config",
                    p.display()
                )));
            }
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let videos = generate_dataset(config.data_seed, config.n_videos, config.n_classes)?;
    let labels = label_map(&videos);

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut rows: Vec<MetricRow> = if resume.is_some() && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < state.step)
            .collect()
    } else {
        Vec::new()
    };
    let write_rows = |rows: &[MetricRow]| {
        std::fs::write(&metrics_path, metrics_csv(rows)).map_err(|e| Error::io(&metrics_path, e))
    };

    let total = config.total_steps() as u64;
    let spe = config.steps_per_epoch() as u64;
    let mut checkpoints = Vec::new();
    while state.step < total {
        let batch = batch_for_step::<T>(config, &videos, state.step)?;
        let report = state.train_step(&batch, &labels)?;
        rows.push(report.metric_row());
        if state.step.is_multiple_of(spe) {
            let epoch = state.step / spe;
            write_rows(&rows)?;
            if config.checkpoint_every > 0 && epoch.is_multiple_of(config.checkpoint_every as u64) {
                let p = out_dir.join(epoch_checkpoint_name(epoch));
                save_checkpoint(&state, &p)?;
                checkpoints.push(p);
            }
        }
    }
    write_rows(&rows)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(RunSummary {
        metrics: rows,
        checkpoints,
        final_checkpoint,
    })
}
