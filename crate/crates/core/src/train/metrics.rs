//! Per-step training metrics and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "step,epoch,lr,m,loss_total,loss_intra,loss_nn,qintra_len,qnn_len,nn_same_class_frac";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Zero-based global step.
    pub step: u64,
    /// One-based epoch the step belongs to.
    pub epoch: u64,
    pub lr: f64,
    pub m: f64,
    pub loss_total: f64,
    pub loss_intra: f64,
    pub loss_nn: f64,
    pub qintra_len: usize,
    pub qnn_len: usize,
    /// Share of mined neighbors (other videos only) with the query's class.
    pub nn_same_class_frac: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},",
            self.step,
            self.epoch,
            self.lr,
            self.m,
            self.loss_total,
            self.loss_intra,
            self.loss_nn,
            self.qintra_len,
            self.qnn_len
        );
        if let Some(f) = self.nn_same_class_frac {
            let _ = write!(s, "{f}");
        }
        s
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(format!("expected 10 columns, found {}", cols.len()));
        }
        fn p<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
            s.trim().parse().map_err(|_| format!("bad {name} value {s:?}"))
        }
        Ok(Self {
            step: p(cols[0], "step")?,
            epoch: p(cols[1], "epoch")?,
            lr: p(cols[2], "lr")?,
            m: p(cols[3], "m")?,
            loss_total: p(cols[4], "loss_total")?,
            loss_intra: p(cols[5], "loss_intra")?,
            loss_nn: p(cols[6], "loss_nn")?,
            qintra_len: p(cols[7], "qintra_len")?,
            qnn_len: p(cols[8], "qnn_len")?,
            nn_same_class_frac: if cols[9].trim().is_empty() {
                None
            } else {
                Some(p(cols[9], "nn_same_class_frac")?)
            },
        })
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_metrics(text: &str, origin: &Path) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                msg: "missing metrics header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            MetricRow::parse(l).map_err(|msg| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}

/// Per-epoch means of loss and mined-neighbor quality.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_intra: f64,
    pub loss_nn: f64,
    /// Mean over steps that mined at least one cross-video neighbor.
    pub nn_same_class_frac: Option<f64>,
}

pub fn epoch_summaries(rows: &[MetricRow]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let epoch = rows[i].epoch;
        let group: Vec<&MetricRow> = rows[i..].iter().take_while(|r| r.epoch == epoch).collect();
        i += group.len();
        let n = group.len() as f64;
        let fracs: Vec<f64> = group.iter().filter_map(|r| r.nn_same_class_frac).collect();
        out.push(EpochSummary {
            epoch,
            loss_total: group.iter().map(|r| r.loss_total).sum::<f64>() / n,
            loss_intra: group.iter().map(|r| r.loss_intra).sum::<f64>() / n,
            loss_nn: group.iter().map(|r| r.loss_nn).sum::<f64>() / n,
            nn_same_class_frac: (!fracs.is_empty())
                .then(|| fracs.iter().sum::<f64>() / fracs.len() as f64),
        });
    }
    out
}
