//! Session metrics, the accuracy measure, and the aggregated report files.
//!
//! `metrics.json` must be byte-identical across reruns with the same config
//! and seed, so wall-clock timings are kept out of it; they go to the run
//! log and stdout instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions and truths differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("report needs at least one run")]
    NoRuns,
    #[error("reference group `{0}` not found")]
    UnknownReference(String),
    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Accuracy over the growing test pool, one entry per session, plus the
/// config echo that produced it. Wall-clock values are never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub seed: u64,
    pub session_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub classes_seen: Vec<usize>,
    #[serde(skip)]
    pub wall_clock_s: Vec<f64>,
    pub config_echo: serde_json::Value,
}

impl SessionMetrics {
    pub fn new(
        seed: u64,
        session_accuracy: Vec<f64>,
        classes_seen: Vec<usize>,
        wall_clock_s: Vec<f64>,
        config_echo: serde_json::Value,
    ) -> Self {
        let average_accuracy =
            session_accuracy.iter().sum::<f64>() / session_accuracy.len().max(1) as f64;
        Self {
            seed,
            session_accuracy,
            average_accuracy,
            classes_seen,
            wall_clock_s,
            config_echo,
        }
    }
}

/// Fraction of exact matches.
pub fn session_accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(
            predictions.len(),
            truths.len(),
        ));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// A named set of seeded runs of the same configuration (a method or an
/// ablation row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunGroup {
    pub name: String,
    pub runs: Vec<SessionMetrics>,
}

impl RunGroup {
    pub fn mean_session_accuracy(&self) -> Vec<f64> {
        let k = self.runs.first().map_or(0, |r| r.session_accuracy.len());
        (0..k)
            .map(|s| {
                self.runs.iter().map(|r| r.session_accuracy[s]).sum::<f64>()
                    / self.runs.len() as f64
            })
            .collect()
    }

    pub fn std_session_accuracy(&self) -> Vec<f64> {
        let means = self.mean_session_accuracy();
        means
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let var = self
                    .runs
                    .iter()
                    .map(|r| (r.session_accuracy[s] - m) * (r.session_accuracy[s] - m))
                    .sum::<f64>()
                    / self.runs.len() as f64;
                var.sqrt()
            })
            .collect()
    }

    pub fn mean_average_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.average_accuracy).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn std_average_accuracy(&self) -> f64 {
        let m = self.mean_average_accuracy();
        (self
            .runs
            .iter()
            .map(|r| (r.average_accuracy - m) * (r.average_accuracy - m))
            .sum::<f64>()
            / self.runs.len().max(1) as f64)
            .sqrt()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    schema_version: u32,
    groups: Vec<GroupSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupSummary {
    name: String,
    seeds: Vec<u64>,
    mean_session_accuracy: Vec<f64>,
    std_session_accuracy: Vec<f64>,
    mean_average_accuracy: f64,
    std_average_accuracy: f64,
    runs: Vec<SessionMetrics>,
}

#[derive(Debug)]
pub struct ReportPaths {
    pub metrics_json: PathBuf,
    pub sessions_csv: PathBuf,
}

/// Writes `metrics.json` (full, deterministic) and `sessions.csv`
/// (mean±std in percent, two decimals, one row per group, optional gap
/// column against a reference group).
pub fn report(
    groups: &[RunGroup],
    out_dir: &Path,
    reference: Option<&str>,
) -> Result<ReportPaths, MetricsError> {
    if groups.is_empty() || groups.iter().any(|g| g.runs.is_empty()) {
        return Err(MetricsError::NoRuns);
    }
    let ref_avg = match reference {
        None => None,
        Some(name) => Some(
            groups
                .iter()
                .find(|g| g.name == name)
                .ok_or_else(|| MetricsError::UnknownReference(name.to_string()))?
                .mean_average_accuracy(),
        ),
    };
    std::fs::create_dir_all(out_dir)?;

    let summaries: Vec<GroupSummary> = groups
        .iter()
        .map(|g| GroupSummary {
            name: g.name.clone(),
            seeds: g.runs.iter().map(|r| r.seed).collect(),
            mean_session_accuracy: g.mean_session_accuracy(),
            std_session_accuracy: g.std_session_accuracy(),
            mean_average_accuracy: g.mean_average_accuracy(),
            std_average_accuracy: g.std_average_accuracy(),
            runs: g.runs.clone(),
        })
        .collect();
    let file = MetricsFile {
        schema_version: 1,
        groups: summaries,
    };
    let metrics_json = out_dir.join("metrics.json");
    std::fs::write(&metrics_json, serde_json::to_string_pretty(&file)?)?;

    let n_sessions = groups[0].runs[0].session_accuracy.len();
    let mut csv = String::from("method");
    for s in 1..=n_sessions {
        csv.push_str(&format!(",session_{s}"));
    }
    csv.push_str(",avg");
    if reference.is_some() {
        csv.push_str(&format!(",gap_to_{}", reference.expect("checked")));
    }
    csv.push('\n');
    for g in groups {
        csv.push_str(&g.name);
        let means = g.mean_session_accuracy();
        let stds = g.std_session_accuracy();
        for (m, s) in means.iter().zip(&stds) {
            csv.push_str(&format!(",{:.2}±{:.2}", m * 100.0, s * 100.0));
        }
        csv.push_str(&format!(
            ",{:.2}±{:.2}",
            g.mean_average_accuracy() * 100.0,
            g.std_average_accuracy() * 100.0
        ));
        if let Some(r) = ref_avg {
            csv.push_str(&format!(
                ",{:+.2}",
                (g.mean_average_accuracy() - r) * 100.0
            ));
        }
        csv.push('\n');
    }
    let sessions_csv = out_dir.join("sessions.csv");
    std::fs::write(&sessions_csv, csv)?;
    Ok(ReportPaths {
        metrics_json,
        sessions_csv,
    })
}

/// Parses a `sessions.csv` back into per-group mean session accuracies (as
/// fractions). Used to check the CSV against the JSON it was written with.
pub fn parse_sessions_csv(text: &str) -> Result<BTreeMap<String, Vec<f64>>, MetricsError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(MetricsError::Empty)?;
    let cols: Vec<&str> = header.split(',').collect();
    let session_cols: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("session_") || **c == "avg")
        .map(|(i, _)| i)
        .collect();
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(MetricsError::CsvParse {
                line: i + 1,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let mut values = Vec::new();
        for &c in &session_cols {
            let mean_part = fields[c].split('±').next().ok_or(MetricsError::CsvParse {
                line: i + 1,
                message: "missing ± separator".into(),
            })?;
            let v: f64 = mean_part.parse().map_err(|e: std::num::ParseFloatError| {
                MetricsError::CsvParse {
                    line: i + 1,
                    message: e.to_string(),
                }
            })?;
            values.push(v / 100.0);
        }
        out.insert(fields[0].to_string(), values);
    }
    Ok(out)
}
