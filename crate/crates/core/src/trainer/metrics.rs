use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppo::LossBreakdown;
use super::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub frames: u64,
    pub updates: u64,
    pub loss: LossBreakdown,
    /// Mean return of episodes that finished during this rollout.
    pub train_return: Option<f64>,
    pub train_success: Option<f64>,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub frames: u64,
    pub success: f64,
    pub spl: f64,
    pub success_runs: Vec<f64>,
    pub spl_runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetricRow {
    Update(UpdateMetrics),
    Validation(ValidationMetrics),
    Event { frames: u64, message: String },
}

impl MetricRow {
    pub fn frames(&self) -> u64 {
        match self {
            MetricRow::Update(u) => u.frames,
            MetricRow::Validation(v) => v.frames,
            MetricRow::Event { frames, .. } => *frames,
        }
    }
}

const FIXED: [&str; 13] = [
    "kind",
    "frames",
    "updates",
    "total_loss",
    "policy",
    "value",
    "action_entropy",
    "attention_entropy",
    "grad_norm",
    "clip_fraction",
    "train_return",
    "train_success",
    "episodes",
];
const TAIL: [&str; 3] = ["success", "spl", "note"];

pub fn header(tasks: &[String]) -> Vec<String> {
    let mut h: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    for t in tasks {
        for suffix in ["raw", "weighted", "diag"] {
            h.push(format!("{t}_{suffix}"));
        }
    }
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn record(row: &MetricRow, tasks: usize) -> Vec<String> {
    let width = FIXED.len() + 3 * tasks + TAIL.len();
    let mut r = vec![String::new(); width];
    match row {
        MetricRow::Update(u) => {
            let l = &u.loss;
            let vals = [
                "update".to_string(),
                u.frames.to_string(),
                u.updates.to_string(),
                l.total.to_string(),
                l.policy.to_string(),
                l.value.to_string(),
                l.action_entropy.to_string(),
                l.attention_entropy.to_string(),
                l.grad_norm.to_string(),
                l.clip_fraction.to_string(),
                opt(u.train_return),
                opt(u.train_success),
                u.episodes.to_string(),
            ];
            for (dst, v) in r.iter_mut().zip(vals) {
                *dst = v;
            }
            for (i, a) in l.aux.iter().enumerate().take(tasks) {
                let base = FIXED.len() + 3 * i;
                r[base] = a.raw_loss.to_string();
                r[base + 1] = a.weighted_loss.to_string();
                r[base + 2] = a.diagnostic.to_string();
            }
        }
        MetricRow::Validation(v) => {
            r[0] = "validation".into();
            r[1] = v.frames.to_string();
            r[width - 3] = v.success.to_string();
            r[width - 2] = v.spl.to_string();
        }
        MetricRow::Event { frames, message } => {
            r[0] = "event".into();
            r[1] = frames.to_string();
            r[width - 1] = message.clone();
        }
    }
    r
}

/// CSV sink for metric rows.
pub struct MetricsWriter {
    path: PathBuf,
    tasks: usize,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Opens `path`, keeping existing rows up to `keep_frames` (all rows are
    /// dropped when it is 0) and appending after them.
    pub fn open(path: &Path, tasks: &[String], keep_frames: u64) -> Result<Self> {
        let io = |source| TrainError::Io {
            path: path.into(),
            source,
        };
        let csv_err = |e: csv::Error| TrainError::Io {
            path: path.into(),
            source: std::io::Error::other(e),
        };
        let mut kept: Vec<csv::StringRecord> = Vec::new();
        if keep_frames > 0 && path.exists() {
            let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                let frames: u64 = rec.get(1).and_then(|f| f.parse().ok()).unwrap_or(u64::MAX);
                if frames <= keep_frames {
                    kept.push(rec);
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = File::create(path).map_err(io)?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(header(tasks)).map_err(csv_err)?;
        for rec in &kept {
            inner.write_record(rec).map_err(csv_err)?;
        }
        inner.flush().map_err(io)?;
        Ok(Self {
            path: path.into(),
            tasks: tasks.len(),
            inner,
        })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        let path = self.path.clone();
        self.inner
            .write_record(record(row, self.tasks))
            .map_err(|e| TrainError::Io {
                path,
                source: std::io::Error::other(e),
            })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|source| TrainError::Io {
            path: self.path.clone(),
            source,
        })
    }
}
