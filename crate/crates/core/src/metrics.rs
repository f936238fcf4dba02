//! Voxel-count segmentation metrics with per-patient averaging.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{PatientCase, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} voxels but ground truth has {truth}")]
    DimMismatch { pred: usize, truth: usize },
    #[error("voxel {index} holds {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f64 },
    #[error("no cases to evaluate")]
    Empty,
    #[error("case {id}: {detail}")]
    Predict { id: String, detail: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Metrics {
    fn values(&self) -> [f64; 5] {
        [self.dice, self.sensitivity, self.specificity, self.precision, self.f1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// sorted by id
    pub per_patient: Vec<PatientMetrics>,
    /// unweighted mean over patients
    pub aggregate: Metrics,
}

/// Checks a 0/1 mask volume and returns it as bytes.
pub fn binary_map(v: &Volume) -> Result<Vec<u8>, MetricsError> {
    v.voxels
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            if x == 0.0 {
                Ok(0)
            } else if x == 1.0 {
                Ok(1)
            } else {
                Err(MetricsError::NonBinary {
                    index,
                    value: x as f64,
                })
            }
        })
        .collect()
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::DimMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(MetricsError::NonBinary {
                    index,
                    value: p.max(t) as f64,
                })
            }
        }
    }
    Ok(c)
}

/// `num / den`, or `vacuous` when nothing was there to count.
fn ratio(num: u64, den: u64, vacuous: f64) -> f64 {
    if den == 0 {
        vacuous
    } else {
        num as f64 / den as f64
    }
}

/// The five indices. A zero denominator scores 1 when nothing could have
/// been missed and 0 otherwise; precision with no positive predictions is
/// 1 only if there were also no lesion voxels to find.
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_, 1.0);
    let specificity = ratio(c.tn, c.tn + c.fp, 1.0);
    let precision = ratio(c.tp, c.tp + c.fp, if c.fn_ == 0 { 1.0 } else { 0.0 });
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0);
    let f1 = if precision + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    Metrics {
        dice,
        sensitivity,
        specificity,
        precision,
        f1,
    }
}

pub fn mean_metrics(rows: &[Metrics]) -> Metrics {
    let n = rows.len().max(1) as f64;
    let mut s = [0.0; 5];
    for r in rows {
        for (acc, v) in s.iter_mut().zip(r.values()) {
            *acc += v;
        }
    }
    Metrics {
        dice: s[0] / n,
        sensitivity: s[1] / n,
        specificity: s[2] / n,
        precision: s[3] / n,
        f1: s[4] / n,
    }
}

impl MetricReport {
    pub fn from_patients(mut per_patient: Vec<PatientMetrics>) -> Result<Self, MetricsError> {
        if per_patient.is_empty() {
            return Err(MetricsError::Empty);
        }
        per_patient.sort_by(|a, b| a.id.cmp(&b.id));
        let rows: Vec<Metrics> = per_patient.iter().map(|p| p.metrics).collect();
        Ok(Self {
            aggregate: mean_metrics(&rows),
            per_patient,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per patient plus the mean.
    pub fn table(&self) -> String {
        let width = self.per_patient.iter().map(|p| p.id.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>11}  {:>11}  {:>9}  {:>7}",
            "patient", "dice", "sensitivity", "specificity", "precision", "f1"
        );
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>11.4}  {:>11.4}  {:>9.4}  {:>7.4}",
                name, m.dice, m.sensitivity, m.specificity, m.precision, m.f1
            );
        };
        for p in &self.per_patient {
            row(&p.id, &p.metrics);
        }
        row("mean", &self.aggregate);
        out
    }
}

/// Scores `predict(case)` against each case's mask. `predict` returns a
/// 0/1 map in the case's voxel order.
pub fn evaluate_cases<P>(cases: &[PatientCase], predict: P) -> Result<MetricReport, MetricsError>
where
    P: Fn(&PatientCase) -> Result<Vec<u8>, String> + Sync,
{
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rows = cases
        .par_iter()
        .map(|case| {
            let pred = predict(case).map_err(|detail| MetricsError::Predict {
                id: case.id.clone(),
                detail,
            })?;
            let counts = confusion(&pred, &binary_map(&case.mask)?)?;
            Ok(PatientMetrics {
                id: case.id.clone(),
                counts,
                metrics: compute_metrics(&counts),
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    MetricReport::from_patients(rows)
}
