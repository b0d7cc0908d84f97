//! Subcommand bodies behind the `iivcl` binary.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_dataset, SyntheticVideo};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::*;
use crate::train::{load_checkpoint, read_metrics, Config, MetricRow, METRICS_FILE};

pub const FEATURES_TRAIN_FILE: &str = "features_train.csv";
pub const FEATURES_TEST_FILE: &str = "features_test.csv";

/// Shared inputs of the evaluation subcommands.
pub struct EvalContext {
    pub config: Config,
    pub encoder: Encoder<f32>,
    pub videos: Vec<SyntheticVideo>,
    pub out: PathBuf,
}

impl EvalContext {
    pub fn open(config: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<Self> {
        let config = Config::load(config)?;
        let encoder = trained_encoder(&config, checkpoint)?;
        let videos = generate_dataset(config.data_seed, config.n_videos, config.n_classes)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            config,
            encoder,
            videos,
            out: out.to_path_buf(),
        })
    }

    /// He-initialized query encoder from the config seed, as before training.
    pub fn untrained(&self) -> Result<Encoder<f32>> {
        untrained_encoder(&self.config)
    }
}

pub fn untrained_encoder(config: &Config) -> Result<Encoder<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Encoder::init(config.encoder_config(), &mut rng)
}

/// Query encoder of `checkpoint`; it must have the config's architecture.
pub fn trained_encoder(config: &Config, checkpoint: Option<&Path>) -> Result<Encoder<f32>> {
    let path = checkpoint.ok_or_else(|| Error::config("--checkpoint is required"))?;
    let state = load_checkpoint::<f32>(path)?;
    if state.config.encoder_config() != config.encoder_config() {
        return Err(Error::config(format!(
            "{} holds a different encoder architecture than the config",
            path.display()
        )));
    }
    Ok(state.pair.query)
}

pub fn extract(ctx: &EvalContext) -> Result<()> {
    let (train, test) = split_features(&ctx.encoder, &ctx.videos, &ctx.config)?;
    for (f, name) in [(train, FEATURES_TRAIN_FILE), (test, FEATURES_TEST_FILE)] {
        let p = ctx.out.join(name);
        std::fs::write(&p, f.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn probe(ctx: &EvalContext) -> Result<ProbeSummary> {
    let c = &ctx.config;
    let (train, test) = split_features(&ctx.encoder, &ctx.videos, c)?;
    let trained = linear_probe(&train, &test, c.probe_epochs, c.probe_lr)?;
    let (utrain, utest) = split_features(&ctx.untrained()?, &ctx.videos, c)?;
    let untrained = linear_probe(&utrain, &utest, c.probe_epochs, c.probe_lr)?;
    let nonempty = !test.is_empty();
    let s = ProbeSummary {
        accuracy: nonempty.then_some(trained.accuracy),
        untrained_accuracy: nonempty.then_some(untrained.accuracy),
        chance: Some(1.0 / c.n_classes as f64),
        n_train: train.len(),
        n_test: test.len(),
    };
    write_json(&s, &ctx.out.join(PROBE_FILE))?;
    Ok(s)
}

pub fn retrieve(ctx: &EvalContext) -> Result<RetrievalSummary> {
    let c = &ctx.config;
    let recall = |enc: &Encoder<f32>| -> Result<Vec<Option<f64>>> {
        let (train, test) = split_features(enc, &ctx.videos, c)?;
        let r = recall_at_k(&test, &train, &c.recall_ks)?;
        Ok(r.recall.into_iter().map(|v| (!test.is_empty()).then_some(v)).collect())
    };
    let s = RetrievalSummary {
        ks: c.recall_ks.clone(),
        recall: recall(&ctx.encoder)?,
        untrained_recall: recall(&ctx.untrained()?)?,
    };
    write_json(&s, &ctx.out.join(RETRIEVAL_FILE))?;
    Ok(s)
}

pub fn fewshot(ctx: &EvalContext) -> Result<FewShotSummary> {
    let c = &ctx.config;
    let (train, test) = split_features(&ctx.encoder, &ctx.videos, c)?;
    let mut points = Vec::new();
    for &fraction in &c.fewshot_fractions {
        let accuracies = (0..c.fewshot_seeds as u64)
            .map(|seed| {
                let sub = few_shot_subset(&train, fraction, seed)?;
                Ok(linear_probe(&sub, &test, c.probe_epochs, c.probe_lr)?.accuracy)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean_accuracy = (!accuracies.is_empty() && !test.is_empty())
            .then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64);
        points.push(FewShotPoint {
            fraction,
            accuracies,
            mean_accuracy,
        });
    }
    let s = FewShotSummary { points };
    write_json(&s, &ctx.out.join(FEWSHOT_FILE))?;
    Ok(s)
}

/// Expected same-class fraction of a random neighbor, excluding self.
pub fn neighbor_chance(class_ids: &[u32]) -> Option<f64> {
    let n = class_ids.len();
    if n < 2 {
        return None;
    }
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for &c in class_ids {
        *counts.entry(c).or_default() += 1;
    }
    let pairs: usize = counts.values().map(|&m| m * (m - 1)).sum();
    Some(pairs as f64 / (n * (n - 1)) as f64)
}

pub fn nnquality(ctx: &EvalContext) -> Result<NnQualitySummary> {
    let videos: Vec<&SyntheticVideo> = ctx.videos.iter().collect();
    let frac = nn_quality(&ctx.encoder, &videos, &ctx.config)?;
    let classes: Vec<u32> = videos.iter().map(|v| v.class_id).collect();
    let s = NnQualitySummary {
        k: ctx.config.nn_quality_k,
        same_class_fraction: Some(frac),
        chance: neighbor_chance(&classes),
    };
    write_json(&s, &ctx.out.join(NN_QUALITY_FILE))?;
    Ok(s)
}

pub fn cooccur(config: &Config, classes: Option<u64>, queue: Option<u64>, out: &Path) -> Result<CooccurSummary> {
    let classes = classes.unwrap_or(config.n_classes as u64);
    let queue = queue.unwrap_or(config.queue_capacity as u64);
    let s = CooccurSummary {
        classes,
        queue,
        probability: cooccurrence_probability(classes, queue)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&s, &out.join(COOCCUR_FILE))?;
    Ok(s)
}

/// Builds the report from the metrics log and eval outputs under `inputs`.
pub fn report(config: Option<&Config>, metrics: Option<&Path>, inputs: &Path, out: &Path) -> Result<Report> {
    let default_metrics = inputs.join(METRICS_FILE);
    let rows: Vec<MetricRow> = match metrics {
        Some(p) => read_metrics(p)?,
        None if default_metrics.exists() => read_metrics(&default_metrics)?,
        None => Vec::new(),
    };
    let r = build_report(config, &rows, inputs)?;
    write_report(&r, &rows, out)?;
    Ok(r)
}
