//! Flat `key = value` run configuration shared by training and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, ClipConfig, DatasetSpec};
use crate::encoder::{AnnealShape, ConvLayerSpec, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Momentum,
    NonMomentum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub lambda_intra: f64,
    pub lambda_nn: f64,
    pub queue_capacity: usize,
    pub min_nn_pool: usize,
    pub momentum_init: f64,
    pub momentum_anneal: AnnealShape,
    pub mode: TrainMode,
    /// When false the nearest-neighbor head and loss are never evaluated.
    pub nn_path: bool,
    pub seed: u64,
    pub checkpoint_every: usize,

    pub data_seed: u64,
    pub n_videos: usize,
    pub n_classes: usize,
    pub clip_len: usize,
    pub temporal_stride: usize,
    pub clip_size: usize,
    pub crop_scale_min: f32,
    pub flip_p: f32,
    pub jitter_p: f32,
    pub jitter_strength: f32,
    pub blur_p: f32,

    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub head_dims: Vec<usize>,

    pub test_fraction: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub recall_ks: Vec<usize>,
    pub fewshot_fractions: Vec<f64>,
    pub fewshot_seeds: usize,
    pub nn_quality_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.05,
            warmup_epochs: 5,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.1,
            lambda_intra: 1.0,
            lambda_nn: 1.0,
            queue_capacity: 512,
            min_nn_pool: 64,
            momentum_init: 0.994,
            momentum_anneal: AnnealShape::Cosine,
            mode: TrainMode::Momentum,
            nn_path: true,
            seed: 42,
            checkpoint_every: 1,
            data_seed: 42,
            n_videos: 320,
            n_classes: 16,
            clip_len: 4,
            temporal_stride: 1,
            clip_size: 16,
            crop_scale_min: 0.5,
            flip_p: 0.2,
            jitter_p: 0.8,
            jitter_strength: 0.4,
            blur_p: 0.5,
            conv_channels: vec![8, 16, 32],
            conv_strides: vec![1, 2, 2],
            conv_kernel: 3,
            conv_padding: 1,
            head_dims: vec![32, 16],
            test_fraction: 0.2,
            probe_epochs: 200,
            probe_lr: 1.0,
            recall_ks: vec![1, 5, 10, 20],
            fewshot_fractions: vec![0.1, 0.25, 0.5],
            fewshot_seeds: 3,
            nn_quality_k: 5,
        }
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad list element {p:?}")))
        .collect()
}

fn parse_one<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("cannot parse {s:?}"))
}

impl Config {
    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("sgd_momentum", self.sgd_momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("temperature", self.temperature.to_string());
        kv("lambda_intra", self.lambda_intra.to_string());
        kv("lambda_nn", self.lambda_nn.to_string());
        kv("queue_capacity", self.queue_capacity.to_string());
        kv("min_nn_pool", self.min_nn_pool.to_string());
        kv("momentum_init", self.momentum_init.to_string());
        kv(
            "momentum_anneal",
            match self.momentum_anneal {
                AnnealShape::Cosine => "cosine",
                AnnealShape::Linear => "linear",
                AnnealShape::Constant => "constant",
            }
            .into(),
        );
        kv(
            "mode",
            match self.mode {
                TrainMode::Momentum => "momentum",
                TrainMode::NonMomentum => "non_momentum",
            }
            .into(),
        );
        kv("nn_path", self.nn_path.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("n_videos", self.n_videos.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("clip_len", self.clip_len.to_string());
        kv("temporal_stride", self.temporal_stride.to_string());
        kv("clip_size", self.clip_size.to_string());
        kv("crop_scale_min", self.crop_scale_min.to_string());
        kv("flip_p", self.flip_p.to_string());
        kv("jitter_p", self.jitter_p.to_string());
        kv("jitter_strength", self.jitter_strength.to_string());
        kv("blur_p", self.blur_p.to_string());
        kv("conv_channels", list(&self.conv_channels));
        kv("conv_strides", list(&self.conv_strides));
        kv("conv_kernel", self.conv_kernel.to_string());
        kv("conv_padding", self.conv_padding.to_string());
        kv("head_dims", list(&self.head_dims));
        kv("test_fraction", self.test_fraction.to_string());
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("probe_lr", self.probe_lr.to_string());
        kv("recall_ks", list(&self.recall_ks));
        kv("fewshot_fractions", list(&self.fewshot_fractions));
        kv("fewshot_seeds", self.fewshot_seeds.to_string());
        kv("nn_quality_k", self.nn_quality_k.to_string());
        s
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "epochs" => self.epochs = parse_one(v)?,
            "batch_size" => self.batch_size = parse_one(v)?,
            "base_lr" => self.base_lr = parse_one(v)?,
            "warmup_epochs" => self.warmup_epochs = parse_one(v)?,
            "sgd_momentum" => self.sgd_momentum = parse_one(v)?,
            "weight_decay" => self.weight_decay = parse_one(v)?,
            "temperature" => self.temperature = parse_one(v)?,
            "lambda_intra" => self.lambda_intra = parse_one(v)?,
            "lambda_nn" => self.lambda_nn = parse_one(v)?,
            "queue_capacity" => self.queue_capacity = parse_one(v)?,
            "min_nn_pool" => self.min_nn_pool = parse_one(v)?,
            "momentum_init" => self.momentum_init = parse_one(v)?,
            "momentum_anneal" => {
                self.momentum_anneal = match v {
                    "cosine" => AnnealShape::Cosine,
                    "linear" => AnnealShape::Linear,
                    "constant" => AnnealShape::Constant,
                    _ => return Err(format!("unknown anneal shape {v:?}")),
                }
            }
            "mode" => {
                self.mode = match v {
                    "momentum" => TrainMode::Momentum,
                    "non_momentum" => TrainMode::NonMomentum,
                    _ => return Err(format!("unknown mode {v:?}")),
                }
            }
            "nn_path" => self.nn_path = parse_one(v)?,
            "seed" => self.seed = parse_one(v)?,
            "checkpoint_every" => self.checkpoint_every = parse_one(v)?,
            "data_seed" => self.data_seed = parse_one(v)?,
            "n_videos" => self.n_videos = parse_one(v)?,
            "n_classes" => self.n_classes = parse_one(v)?,
            "clip_len" => self.clip_len = parse_one(v)?,
            "temporal_stride" => self.temporal_stride = parse_one(v)?,
            "clip_size" => self.clip_size = parse_one(v)?,
            "crop_scale_min" => self.crop_scale_min = parse_one(v)?,
            "flip_p" => self.flip_p = parse_one(v)?,
            "jitter_p" => self.jitter_p = parse_one(v)?,
            "jitter_strength" => self.jitter_strength = parse_one(v)?,
            "blur_p" => self.blur_p = parse_one(v)?,
            "conv_channels" => self.conv_channels = parse_list(v)?,
            "conv_strides" => self.conv_strides = parse_list(v)?,
            "conv_kernel" => self.conv_kernel = parse_one(v)?,
            "conv_padding" => self.conv_padding = parse_one(v)?,
            "head_dims" => self.head_dims = parse_list(v)?,
            "test_fraction" => self.test_fraction = parse_one(v)?,
            "probe_epochs" => self.probe_epochs = parse_one(v)?,
            "probe_lr" => self.probe_lr = parse_one(v)?,
            "recall_ks" => self.recall_ks = parse_list(v)?,
            "fewshot_fractions" => self.fewshot_fractions = parse_list(v)?,
            "fewshot_seeds" => self.fewshot_seeds = parse_one(v)?,
            "nn_quality_k" => self.nn_quality_k = parse_one(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `origin` labels parse errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("base_lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("sgd_momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.momentum_init) {
            return fail("momentum_init must lie in [0, 1]");
        }
        self.loss_weights().validate()?;
        if self.queue_capacity < self.batch_size {
            return fail("queue_capacity must hold at least one batch");
        }
        if self.n_videos < self.batch_size {
            return fail("n_videos must be at least batch_size");
        }
        DatasetSpec::new(self.n_videos, self.n_classes)?;
        if self.clip_len == 0 || self.temporal_stride == 0 || self.clip_size == 0 {
            return fail("clip_len, temporal_stride and clip_size must be positive");
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return fail("crop_scale_min must lie in (0, 1]");
        }
        let probs = [self.flip_p, self.jitter_p, self.blur_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("augmentation probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return fail("jitter_strength must lie in [0, 1)");
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return fail("conv_channels and conv_strides must have equal length");
        }
        self.encoder_config().geometries()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)");
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return fail("recall_ks must be non-empty and positive");
        }
        if self.fewshot_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return fail("fewshot_fractions must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_intra: self.lambda_intra,
            lambda_nn: self.lambda_nn,
            temperature: self.temperature,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_shape: [1, self.clip_len, self.clip_size, self.clip_size],
            conv: self
                .conv_channels
                .iter()
                .zip(&self.conv_strides)
                .map(|(&c, &s)| ConvLayerSpec {
                    out_channels: c,
                    kernel: self.conv_kernel,
                    stride: s,
                    padding: self.conv_padding,
                })
                .collect(),
            head_dims: self.head_dims.clone(),
        }
    }

    pub fn clip_config(&self) -> ClipConfig {
        ClipConfig {
            clip_len: self.clip_len,
            temporal_stride: self.temporal_stride,
            out_size: self.clip_size,
            augment: AugmentConfig {
                crop_scale: (self.crop_scale_min, 1.0),
                flip_p: self.flip_p,
                jitter_p: self.jitter_p,
                jitter_strength: self.jitter_strength,
                blur_p: self.blur_p,
                ..AugmentConfig::default()
            },
            ..ClipConfig::default()
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        DatasetSpec::new(self.n_videos, self.n_classes)
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.n_videos / self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
