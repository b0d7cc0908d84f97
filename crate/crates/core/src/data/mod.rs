//! Synthetic moving-shape videos, clip sampling and augmentation.

mod augment;
mod dump;
mod synth;

pub use augment::{augment, hflip, resize_crop, AugmentConfig, AugmentParams, CropBox};
pub use dump::{dump_corpus, read_manifest, read_video, write_video, MANIFEST_FILE};
pub use synth::{
    center_view, generate_dataset, generate_video, sample_clip_pair, sample_start, ClipConfig, ClipPair,
    DatasetSpec, Motion, ShapeKind, SyntheticVideo,
};
