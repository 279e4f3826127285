//! Classification metrics: per-class precision/recall/F1, support-weighted F1
//! and the confusion matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One utterance's predicted distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub dialogue: String,
    pub utterance: String,
    pub gold: Option<usize>,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// `Σ support_c · F1_c / Σ support_c`.
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub probabilities: Vec<ProbabilityRow>,
}

pub fn confusion_matrix(gold: &[usize], predicted: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    if gold.len() != predicted.len() {
        return Err(Error::dim("confusion_matrix", &[gold.len()], &[predicted.len()]));
    }
    let mut c = vec![vec![0usize; m]; m];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g >= m || p >= m {
            return Err(Error::Usage(format!("label index {} out of range for {m} classes", g.max(p))));
        }
        c[g][p] += 1;
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_predictions(gold: &[usize], predicted: &[usize], labels: &LabelSet) -> Result<Self> {
        let m = labels.len();
        let confusion = confusion_matrix(gold, predicted, m)?;
        let mut per_class = Vec::with_capacity(m);
        let mut weighted = 0.0;
        let mut correct = 0;
        for c in 0..m {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            // Harmonic mean of precision and recall, from counts. Zero when
            // both are zero.
            let f1 = ratio(2 * tp, support + predicted_c);
            weighted += support as f64 * f1;
            correct += tp;
            per_class.push(ClassMetrics {
                label: labels.name(c).expect("in range").to_string(),
                precision,
                recall,
                f1,
                support,
            });
        }
        let total = gold.len();
        Ok(Self {
            labels: labels.names().to_vec(),
            per_class,
            weighted_f1: if total == 0 { 0.0 } else { weighted / total as f64 },
            accuracy: ratio(correct, total),
            confusion,
            probabilities: Vec::new(),
        })
    }

    pub fn n_utterances(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Per-class rows followed by a `weighted` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,precision,recall,f1,support\n");
        for c in &self.per_class {
            let _ = writeln!(out, "{},{},{},{},{}", c.label, c.precision, c.recall, c.f1, c.support);
        }
        let _ = writeln!(out, "weighted,,,{},{}", self.weighted_f1, self.n_utterances());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// `dialogue,utterance,predicted,<label>...` with one row per utterance.
    pub fn probabilities_csv(&self) -> String {
        probabilities_csv(&self.labels, &self.probabilities)
    }
}

pub fn probabilities_csv(labels: &[String], rows: &[ProbabilityRow]) -> String {
    let mut out = String::from("dialogue,utterance,predicted");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.dialogue, r.utterance, labels[r.predicted]);
        for p in &r.probs {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}
