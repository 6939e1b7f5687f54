use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::mean_std;

/// One named metric with its spread over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Named metrics with run metadata. Wall time is reported in logs only, so
/// the serialized report is byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub task: String,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub reps: usize,
    /// Impressions or users that contributed.
    pub count: usize,
    pub metrics: Vec<MetricValue>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn new(label: impl Into<String>, task: impl Into<String>) -> Self {
        MetricsReport {
            label: label.into(),
            task: task.into(),
            dataset: String::new(),
            config_hash: String::new(),
            seed: 0,
            reps: 1,
            count: 0,
            metrics: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push(MetricValue {
            name: name.into(),
            mean: value,
            std: 0.0,
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.mean)
    }

    /// Mean and standard deviation of each metric across repeated reports
    /// with identical metric names.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
        let mut out = first.clone();
        out.reps = reports.len();
        out.wall_time_secs = reports.iter().map(|r| r.wall_time_secs).sum();
        for (i, m) in out.metrics.iter_mut().enumerate() {
            let mut xs = Vec::with_capacity(reports.len());
            for r in reports {
                let other = r.metrics.get(i).filter(|o| o.name == m.name).ok_or_else(|| {
                    Error::Config(format!("report `{}` lacks metric `{}`", r.label, m.name))
                })?;
                xs.push(other.mean);
            }
            (m.mean, m.std) = mean_std(&xs);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Compatibility(format!("bad report: {e}")))
    }

    /// One row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,task,metric,mean,std,reps,count\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&self.label),
                csv_field(&self.task),
                csv_field(&m.name),
                m.mean,
                m.std,
                self.reps,
                self.count
            ));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} [{}]", self.label, self.task)?;
        for m in &self.metrics {
            if self.reps > 1 {
                write!(f, "  {} {:.4} ± {:.4}", m.name, m.mean, m.std)?;
            } else {
                write!(f, "  {} {:.4}", m.name, m.mean)?;
            }
        }
        Ok(())
    }
}

/// Quotes a CSV field when it holds a comma, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
