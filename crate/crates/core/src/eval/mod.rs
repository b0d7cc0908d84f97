//! Frozen-feature evaluation: probe, retrieval, few-shot, neighbor quality.

mod features;
mod probe;
mod report;
mod retrieval;

pub use features::{extract_embeddings, extract_features, stratified_split, FrozenFeatures, Split};
pub use probe::{few_shot_subset, linear_probe, ProbeResult};
pub use report::*;
pub use retrieval::{cooccurrence_probability, neighbor_agreement, recall_at_k, RetrievalResult};

use crate::data::SyntheticVideo;
use crate::encoder::{Branch, Encoder};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::train::Config;

/// Top-`k` same-class fraction of NN-head embeddings over a labeled corpus.
pub fn nn_quality<T: Scalar>(
    encoder: &Encoder<T>,
    videos: &[&SyntheticVideo],
    config: &Config,
) -> Result<f64> {
    let k = config.nn_quality_k;
    if videos.len() < k + 1 {
        return Err(crate::Error::config(format!(
            "nn quality needs at least {} videos, got {}",
            k + 1,
            videos.len()
        )));
    }
    let z = extract_embeddings(encoder, videos, &config.clip_config(), Branch::Nn)?;
    neighbor_agreement(&z, k)
}

/// Train and test features of the config's corpus under its split.
pub fn split_features<T: Scalar>(
    encoder: &Encoder<T>,
    videos: &[SyntheticVideo],
    config: &Config,
) -> Result<(FrozenFeatures, FrozenFeatures)> {
    let classes: Vec<u32> = videos.iter().map(|v| v.class_id).collect();
    let (train, test) = stratified_split(&classes, config.test_fraction, config.data_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &videos[i]).collect::<Vec<_>>();
    let clip = config.clip_config();
    Ok((
        extract_features(encoder, &pick(&train), &clip, Split::Train)?,
        extract_features(encoder, &pick(&test), &clip, Split::Test)?,
    ))
}
