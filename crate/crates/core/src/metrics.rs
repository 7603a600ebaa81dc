//! Session accuracy, average accuracy (AA), performance drop (PD), confusion
//! matrices, and the JSON/CSV evaluation report.
//!
//! All arithmetic runs at full precision; accuracies are rounded half-up to
//! two decimals only when a report is serialized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{check_dim, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest allowed gap between stored and recomputed AA/PD on load.
pub const CONSISTENCY_TOLERANCE: f64 = 0.01;

/// `100 · correct / total`
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_dim(labels.len(), predictions.len())?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn average_accuracy(session_accuracies: &[f64]) -> Result<f64> {
    if session_accuracies.is_empty() {
        return Err(Error::InvalidInput("average accuracy of no sessions".into()));
    }
    Ok(session_accuracies.iter().sum::<f64>() / session_accuracies.len() as f64)
}

/// First session minus last session.
pub fn performance_drop(session_accuracies: &[f64]) -> Result<f64> {
    match (session_accuracies.first(), session_accuracies.last()) {
        (Some(first), Some(last)) => Ok(first - last),
        _ => Err(Error::InvalidInput("performance drop of no sessions".into())),
    }
}

/// Rounds half-up (toward +∞) to `digits` decimals. The scaled value is
/// first snapped to 1e-6 so binary representation error (90.005 stored as
/// 90.00499..) does not flip the direction.
pub fn round_half_up(value: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    let scaled = (value * scale * 1e6).round() / 1e6;
    (scaled + 0.5).floor() / scale
}

/// Seen-classes × seen-classes counts; row = true class, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(classes: &[usize], predictions: &[usize], labels: &[usize]) -> Result<Self> {
        check_dim(labels.len(), predictions.len())?;
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        if index.len() != classes.len() {
            return Err(Error::InvalidInput("duplicate class in confusion matrix".into()));
        }
        let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
        for (p, l) in predictions.iter().zip(labels) {
            let (Some(&r), Some(&c)) = (index.get(l), index.get(p)) else {
                return Err(Error::InvalidInput(format!("label {l} or prediction {p} outside the seen classes")));
            };
            counts[r][c] += 1;
        }
        Ok(ConfusionMatrix { classes: classes.to_vec(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|v| if s == 0 { 0.0 } else { *v as f64 / s as f64 }).collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Softmax,
    Ncm,
}

impl Track {
    pub fn name(self) -> &'static str {
        match self {
            Track::Softmax => "softmax",
            Track::Ncm => "ncm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub id: usize,
    pub accuracy: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Accuracy restricted to the base-session classes.
    pub base_class_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl SessionResult {
    /// Builds the result from raw predictions over the seen classes; the
    /// first `base_classes` entries of `classes` are the base classes.
    pub fn from_predictions(
        id: usize,
        classes: &[usize],
        base_classes: usize,
        predictions: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(classes, predictions, labels)?;
        let accuracy = accuracy(predictions, labels)?;
        let mut per_class = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            let row = &confusion.counts[i];
            let total: u64 = row.iter().sum();
            if total > 0 {
                per_class.insert(*c, 100.0 * row[i] as f64 / total as f64);
            }
        }
        let base: Vec<(usize, usize)> = predictions
            .iter()
            .zip(labels)
            .filter(|(_, l)| classes[..base_classes.min(classes.len())].contains(l))
            .map(|(p, l)| (*p, *l))
            .collect();
        let base_class_accuracy = if base.is_empty() {
            0.0
        } else {
            100.0 * base.iter().filter(|(p, l)| p == l).count() as f64 / base.len() as f64
        };
        Ok(SessionResult { id, accuracy, per_class, base_class_accuracy, confusion })
    }

    fn rounded(&self) -> Self {
        SessionResult {
            accuracy: round_half_up(self.accuracy, 2),
            per_class: self.per_class.iter().map(|(k, v)| (*k, round_half_up(*v, 2))).collect(),
            base_class_accuracy: round_half_up(self.base_class_accuracy, 2),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub name: Track,
    pub sessions: Vec<SessionResult>,
    pub aa: f64,
    pub pd: f64,
}

impl TrackReport {
    pub fn new(name: Track, sessions: Vec<SessionResult>) -> Result<Self> {
        let acc: Vec<f64> = sessions.iter().map(|s| s.accuracy).collect();
        Ok(TrackReport { name, aa: average_accuracy(&acc)?, pd: performance_drop(&acc)?, sessions })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.accuracy).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: Config,
    pub tracks: Vec<TrackReport>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Timestamps>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl EvalReport {
    pub fn track(&self, name: Track) -> Option<&TrackReport> {
        self.tracks.iter().find(|t| t.name == name)
    }

    /// The report as it reads back after serialization.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        for t in &mut r.tracks {
            t.aa = round_half_up(t.aa, 2);
            t.pd = round_half_up(t.pd, 2);
            t.sessions = t.sessions.iter().map(SessionResult::rounded).collect();
        }
        r
    }

    /// Pretty JSON with every accuracy rounded half-up to two decimals.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.rounded()).map_err(|e| Error::Schema(e.to_string()))
    }

    /// JSON without the timestamps field; identical for identical runs.
    pub fn payload_json(&self) -> Result<String> {
        EvalReport { timestamps: None, ..self.clone() }.to_json()
    }

    /// Long-format CSV: one row per accuracy value, AA/PD, and confusion cell
    /// (raw and row-normalized).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("track,session,metric,class,predicted,value\n");
        for t in &self.tracks {
            let name = t.name.name();
            let _ = writeln!(out, "{name},,aa,,,{:.2}", round_half_up(t.aa, 2));
            let _ = writeln!(out, "{name},,pd,,,{:.2}", round_half_up(t.pd, 2));
            for s in &t.sessions {
                let id = s.id;
                let _ = writeln!(out, "{name},{id},accuracy,,,{:.2}", round_half_up(s.accuracy, 2));
                let _ = writeln!(out, "{name},{id},base_class_accuracy,,,{:.2}", round_half_up(s.base_class_accuracy, 2));
                for (c, v) in &s.per_class {
                    let _ = writeln!(out, "{name},{id},class_accuracy,{c},,{:.2}", round_half_up(*v, 2));
                }
                let normalized = s.confusion.row_normalized();
                for (i, row) in s.confusion.counts.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let (ci, cj) = (s.confusion.classes[i], s.confusion.classes[j]);
                        let _ = writeln!(out, "{name},{id},confusion,{ci},{cj},{v}");
                        let _ = writeln!(out, "{name},{id},confusion_normalized,{ci},{cj},{:.6}", normalized[i][j]);
                    }
                }
            }
        }
        out
    }

    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Csv => self.to_csv(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        report.check_consistency()?;
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EvalReport::from_json(&text)
    }

    /// Schema version, AA/PD against the session list, and confusion
    /// matrices against the stored accuracies.
    pub fn check_consistency(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for t in &self.tracks {
            let acc = t.accuracies();
            let aa = average_accuracy(&acc).map_err(|_| Error::Schema(format!("track {} has no sessions", t.name.name())))?;
            let pd = performance_drop(&acc)?;
            if (aa - t.aa).abs() > CONSISTENCY_TOLERANCE {
                return Err(Error::Consistency(format!(
                    "track {}: stored AA {} but sessions give {aa:.4}",
                    t.name.name(),
                    t.aa
                )));
            }
            if (pd - t.pd).abs() > CONSISTENCY_TOLERANCE {
                return Err(Error::Consistency(format!(
                    "track {}: stored PD {} but sessions give {pd:.4}",
                    t.name.name(),
                    t.pd
                )));
            }
            for s in &t.sessions {
                let c = &s.confusion;
                if c.counts.len() != c.classes.len() || c.counts.iter().any(|r| r.len() != c.classes.len()) {
                    return Err(Error::Schema(format!("session {}: confusion matrix is not square", s.id)));
                }
                let total = c.total();
                if total == 0 {
                    return Err(Error::Consistency(format!("session {}: empty confusion matrix", s.id)));
                }
                let acc = 100.0 * c.trace() as f64 / total as f64;
                if (acc - s.accuracy).abs() > CONSISTENCY_TOLERANCE {
                    return Err(Error::Consistency(format!(
                        "session {}: accuracy {} disagrees with confusion trace ({acc:.4})",
                        s.id, s.accuracy
                    )));
                }
            }
        }
        Ok(())
    }
}
