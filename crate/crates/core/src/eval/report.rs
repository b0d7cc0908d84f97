//! JSON outputs of the eval subcommands and the combined report.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{epoch_summaries, Config, EpochSummary, MetricRow};

pub const PROBE_FILE: &str = "probe.json";
pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const FEWSHOT_FILE: &str = "fewshot.json";
pub const NN_QUALITY_FILE: &str = "nnquality.json";
pub const COOCCUR_FILE: &str = "cooccur.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_CURVE_FILE: &str = "curve_epochs.csv";
pub const FEWSHOT_CURVE_FILE: &str = "curve_fewshot.csv";
pub const RETRIEVAL_CURVE_FILE: &str = "curve_retrieval.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub accuracy: Option<f64>,
    pub untrained_accuracy: Option<f64>,
    pub chance: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub ks: Vec<usize>,
    pub recall: Vec<Option<f64>>,
    pub untrained_recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub fraction: f64,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub points: Vec<FewShotPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnQualitySummary {
    pub k: usize,
    pub same_class_fraction: Option<f64>,
    pub chance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurSummary {
    pub classes: u64,
    pub queue: u64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub first_epoch_loss: Option<f64>,
    pub final_epoch_loss: Option<f64>,
    pub first_epoch_nn_same_class: Option<f64>,
    pub final_epoch_nn_same_class: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config_hash: Option<String>,
    pub training: TrainingSummary,
    pub probe: Option<ProbeSummary>,
    pub retrieval: Option<RetrievalSummary>,
    pub fewshot: Option<FewShotSummary>,
    pub nn_quality: Option<NnQualitySummary>,
    pub cooccurrence: Option<CooccurSummary>,
}

/// `git describe` output captured at build time when available.
pub fn version_string() -> String {
    option_env!("IIVCL_GIT_DESCRIBE")
        .map(String::from)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types always serialize");
    s.push('\n');
    s
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn parse_json<D: DeserializeOwned>(text: &str, path: &Path) -> Result<D> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Reads `path` if it exists.
pub fn read_json_opt<D: DeserializeOwned>(path: &Path) -> Result<Option<D>> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_json(&text, path).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn training_summary(rows: &[MetricRow]) -> TrainingSummary {
    let epochs = epoch_summaries(rows);
    let (first, last) = (epochs.first(), epochs.last());
    TrainingSummary {
        steps: (!rows.is_empty()).then_some(rows.len() as u64),
        epochs: last.map(|e| e.epoch),
        first_epoch_loss: first.map(|e| e.loss_total),
        final_epoch_loss: last.map(|e| e.loss_total),
        first_epoch_nn_same_class: first.and_then(|e| e.nn_same_class_frac),
        final_epoch_nn_same_class: last.and_then(|e| e.nn_same_class_frac),
    }
}

/// Collects whatever eval outputs exist under `inputs`.
pub fn build_report(config: Option<&Config>, metrics: &[MetricRow], inputs: &Path) -> Result<Report> {
    Ok(Report {
        version: version_string(),
        config_hash: config.map(Config::hash),
        training: training_summary(metrics),
        probe: read_json_opt(&inputs.join(PROBE_FILE))?,
        retrieval: read_json_opt(&inputs.join(RETRIEVAL_FILE))?,
        fewshot: read_json_opt(&inputs.join(FEWSHOT_FILE))?,
        nn_quality: read_json_opt(&inputs.join(NN_QUALITY_FILE))?,
        cooccurrence: read_json_opt(&inputs.join(COOCCUR_FILE))?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn epoch_curve_csv(epochs: &[EpochSummary]) -> String {
    let mut s = String::from("epoch,loss_total,loss_intra,loss_nn,nn_same_class_frac\n");
    for e in epochs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.loss_total,
            e.loss_intra,
            e.loss_nn,
            opt(e.nn_same_class_frac)
        ));
    }
    s
}

pub fn fewshot_curve_csv(f: Option<&FewShotSummary>) -> String {
    let mut s = String::from("fraction,mean_accuracy\n");
    for p in f.map(|f| f.points.as_slice()).unwrap_or_default() {
        s.push_str(&format!("{},{}\n", p.fraction, opt(p.mean_accuracy)));
    }
    s
}

pub fn retrieval_curve_csv(r: Option<&RetrievalSummary>) -> String {
    let mut s = String::from("k,recall,untrained_recall\n");
    if let Some(r) = r {
        for (i, k) in r.ks.iter().enumerate() {
            let at = |v: &[Option<f64>]| opt(v.get(i).copied().flatten());
            s.push_str(&format!("{k},{},{}\n", at(&r.recall), at(&r.untrained_recall)));
        }
    }
    s
}

/// Writes the JSON summary and the curve CSVs into `out`.
pub fn write_report(report: &Report, metrics: &[MetricRow], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(report, &out.join(REPORT_FILE))?;
    let files = [
        (LOSS_CURVE_FILE, epoch_curve_csv(&epoch_summaries(metrics))),
        (FEWSHOT_CURVE_FILE, fewshot_curve_csv(report.fewshot.as_ref())),
        (RETRIEVAL_CURVE_FILE, retrieval_curve_csv(report.retrieval.as_ref())),
    ];
    for (name, text) in files {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
