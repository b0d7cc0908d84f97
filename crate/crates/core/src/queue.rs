//! Fixed-capacity FIFO embedding queues and exhaustive nearest-neighbor search.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Allowed deviation of a stored embedding's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry<T> {
    pub embedding: Vec<T>,
    pub video_id: u64,
    /// Ground-truth class, carried for analysis metrics only.
    pub class_id: Option<u32>,
}

impl<T: Scalar> QueueEntry<T> {
    pub fn new(embedding: Vec<T>, video_id: u64) -> Self {
        Self {
            embedding,
            video_id,
            class_id: None,
        }
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }
}

/// FIFO of unit-norm embeddings; the oldest entry sits at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue<T> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry<T>>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<T: Scalar> EmbeddingQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config("queue capacity and dim must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry<T>> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> Option<&QueueEntry<T>> {
        self.entries.get(index)
    }

    /// Appends `batch` in order and evicts the oldest overflow.
    ///
    /// The whole batch is validated before anything is inserted.
    pub fn enqueue_batch(&mut self, batch: Vec<QueueEntry<T>>) -> Result<()> {
        if batch.len() > self.capacity {
            return Err(Error::contract(format!(
                "batch of {} exceeds queue capacity {}",
                batch.len(),
                self.capacity
            )));
        }
        for (i, e) in batch.iter().enumerate() {
            if e.embedding.len() != self.dim {
                return Err(Error::contract(format!(
                    "entry {i} has dim {}, queue dim is {}",
                    e.embedding.len(),
                    self.dim
                )));
            }
            let norm = dot(&e.embedding, &e.embedding).as_f64().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::contract(format!(
                    "entry {i} is not unit-norm (norm {norm})"
                )));
            }
        }
        let overflow = (self.entries.len() + batch.len()).saturating_sub(self.capacity);
        self.entries.drain(..overflow);
        self.entries.extend(batch);
        Ok(())
    }

    /// `s_i = x · z_i` for every entry, oldest first.
    pub fn similarity_row(&self, x: &[T]) -> Result<Vec<T>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyQueue);
        }
        if x.len() != self.dim {
            return Err(Error::dim(format!(
                "query dim {} does not match queue dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.entries.iter().map(|e| dot(x, &e.embedding)).collect())
    }

    /// Index and entry maximizing `x · z`; ties go to the oldest entry.
    pub fn nearest_neighbor(&self, x: &[T]) -> Result<(usize, &QueueEntry<T>)> {
        let sims = self.similarity_row(x)?;
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate().skip(1) {
            if s > sims[best] {
                best = i;
            }
        }
        Ok((best, &self.entries[best]))
    }

    /// All entries except `exclude_index`, order preserved.
    pub fn negatives_excluding(&self, exclude_index: usize) -> Result<Vec<&QueueEntry<T>>> {
        if exclude_index >= self.entries.len() {
            return Err(Error::contract(format!(
                "exclude index {exclude_index} out of range for queue of {}",
                self.entries.len()
            )));
        }
        Ok(self
            .entries
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != exclude_index)
            .map(|(_, e)| e)
            .collect())
    }

    /// Row-major `len×dim` matrix of all embeddings, or `None` when empty.
    pub fn matrix(&self) -> Option<Vec<T>> {
        if self.entries.is_empty() {
            return None;
        }
        Some(
            self.entries
                .iter()
                .flat_map(|e| e.embedding.iter().copied())
                .collect(),
        )
    }
}
