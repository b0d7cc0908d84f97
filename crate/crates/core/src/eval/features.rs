use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{center_view, ClipConfig, SyntheticVideo};
use crate::encoder::{Branch, Encoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-major feature matrix with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures {
    pub dim: usize,
    pub data: Vec<f64>,
    pub class_ids: Vec<u32>,
    pub video_ids: Vec<u64>,
    pub split: Split,
}

impl FrozenFeatures {
    pub fn new(
        dim: usize,
        data: Vec<f64>,
        class_ids: Vec<u32>,
        video_ids: Vec<u64>,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 || data.len() != dim * class_ids.len() || class_ids.len() != video_ids.len() {
            return Err(Error::dim(format!(
                "{} values, {} labels and {} ids do not form rows of width {dim}",
                data.len(),
                class_ids.len(),
                video_ids.len()
            )));
        }
        Ok(Self {
            dim,
            data,
            class_ids,
            video_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            data: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
            video_ids: indices.iter().map(|&i| self.video_ids[i]).collect(),
            split: self.split,
        }
    }

    /// `split,video_id,class_id,f0,f1,...` per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,video_id,class_id");
        for j in 0..self.dim {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        let tag = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..self.len() {
            s.push_str(&format!("{tag},{},{}", self.video_ids[i], self.class_ids[i]));
            for v in self.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Class-stratified train/test split of video positions.
///
/// Each class sends `round(n_c * test_fraction)` videos to test, chosen by
/// a seeded shuffle; both lists come back in corpus order.
pub fn stratified_split(
    class_ids: &[u32],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!(
            "test fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut is_test = vec![false; class_ids.len()];
    for (class, mut members) in group_by_class(class_ids) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let train = (0..class_ids.len()).filter(|&i| !is_test[i]).collect();
    let test = (0..class_ids.len()).filter(|&i| is_test[i]).collect();
    Ok((train, test))
}

/// Positions per class, classes ascending, positions in order.
pub(crate) fn group_by_class(class_ids: &[u32]) -> Vec<(u32, Vec<usize>)> {
    let mut groups = std::collections::BTreeMap::<u32, Vec<usize>>::new();
    for (i, &c) in class_ids.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    groups.into_iter().collect()
}

fn check_videos<T: Scalar>(
    encoder: &Encoder<T>,
    videos: &[&SyntheticVideo],
    clip: &ClipConfig,
) -> Result<()> {
    let [c, t, h, w] = encoder.config().input_shape;
    if (t, h, w) != (clip.clip_len, clip.out_size, clip.out_size) {
        return Err(Error::config(format!(
            "encoder expects clips of {t}x{h}x{w}, clip config yields {}x{}x{}",
            clip.clip_len, clip.out_size, clip.out_size
        )));
    }
    for v in videos {
        let s = v.frames.shape();
        if s.len() != 4 || s[0] != c || s[1] < clip.span() {
            return Err(Error::config(format!(
                "video {} of shape {s:?} does not fit a {c}-channel encoder with span {}",
                v.video_id,
                clip.span()
            )));
        }
    }
    Ok(())
}

/// Pooled backbone features of each video's center view.
pub fn extract_features<T: Scalar>(
    encoder: &Encoder<T>,
    videos: &[&SyntheticVideo],
    clip: &ClipConfig,
    split: Split,
) -> Result<FrozenFeatures> {
    check_videos(encoder, videos, clip)?;
    let rows: Vec<Vec<T>> = videos
        .par_iter()
        .map(|v| encoder.features_value(&center_view(v, clip)?))
        .collect::<Result<_>>()?;
    FrozenFeatures::new(
        encoder.config().backbone_dim(),
        rows.iter().flatten().map(|x| x.as_f64()).collect(),
        videos.iter().map(|v| v.class_id).collect(),
        videos.iter().map(|v| v.video_id).collect(),
        split,
    )
}

/// Unit-norm embeddings of the center views through one projection head.
pub fn extract_embeddings<T: Scalar>(
    encoder: &Encoder<T>,
    videos: &[&SyntheticVideo],
    clip: &ClipConfig,
    branch: Branch,
) -> Result<FrozenFeatures> {
    check_videos(encoder, videos, clip)?;
    let rows: Vec<Vec<T>> = videos
        .par_iter()
        .map(|v| encoder.embed_value(&center_view(v, clip)?, branch))
        .collect::<Result<_>>()?;
    FrozenFeatures::new(
        encoder.config().embedding_dim(),
        rows.iter().flatten().map(|x| x.as_f64()).collect(),
        videos.iter().map(|v| v.class_id).collect(),
        videos.iter().map(|v| v.video_id).collect(),
        Split::Train,
    )
}
