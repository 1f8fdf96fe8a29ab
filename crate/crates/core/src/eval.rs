//! Accuracy reports with a question-type breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{QaExample, Vocabulary};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{encode_qa, qa_loss};
use crate::rng::{fingerprint, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    pub qtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Keyed by question type; counts partition the dataset.
    pub per_qtype: BTreeMap<String, TypeAccuracy>,
    /// Sorted by example id.
    pub predictions: Vec<Prediction>,
    /// Hash of the model configuration and parameter values.
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    /// Fingerprint of the training corpus, when the checkpoint records it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_fingerprint: Option<String>,
}

/// Hash of the canonical JSON Lines form of a dataset.
pub fn dataset_fingerprint(examples: &[QaExample]) -> String {
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&serde_json::to_string(&crate::corpus::DatasetRecord::from(ex)).expect("records serialize"));
        buf.push('\n');
    }
    fingerprint(buf.as_bytes())
}

pub fn model_fingerprint(model: &Model) -> String {
    let mut bytes = serde_json::to_vec(model.config()).expect("config serializes");
    for v in model.to_flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fingerprint(&bytes)
}

/// Option index with the highest QA logit, eval mode. Ties go to the lowest
/// index.
pub fn predict(model: &Model, vocab: &Vocabulary, ex: &QaExample) -> Result<usize> {
    let enc = encode_qa(ex, vocab, model.config().max_len)?;
    // eval mode never draws from the stream
    Ok(qa_loss(model, &enc, Mode::Eval, &mut rng_from_seed(0), None)?.prediction)
}

pub fn evaluate(model: &Model, vocab: &Vocabulary, examples: &[QaExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted: Vec<usize> = examples
        .par_iter()
        .map(|ex| predict(model, vocab, ex))
        .collect::<Result<_>>()?;
    let mut predictions: Vec<Prediction> = examples
        .iter()
        .zip(predicted)
        .map(|(ex, p)| Prediction {
            id: ex.id.clone(),
            predicted: p,
            gold: ex.gold,
            qtype: ex.qtype.as_str().to_string(),
        })
        .collect();
    predictions.sort_by(|a, b| a.id.cmp(&b.id));
    let mut report = summarize(predictions);
    report.config_fingerprint = model_fingerprint(model);
    report.dataset_fingerprint = dataset_fingerprint(examples);
    Ok(report)
}

/// Accuracy totals from a list of predictions; fingerprints left empty.
pub fn summarize(predictions: Vec<Prediction>) -> EvalReport {
    let mut per_qtype: BTreeMap<String, TypeAccuracy> = BTreeMap::new();
    let mut correct = 0;
    for p in &predictions {
        let hit = usize::from(p.predicted == p.gold);
        correct += hit;
        let e = per_qtype.entry(p.qtype.clone()).or_insert(TypeAccuracy {
            accuracy: 0.0,
            correct: 0,
            count: 0,
        });
        e.correct += hit;
        e.count += 1;
    }
    for e in per_qtype.values_mut() {
        e.accuracy = e.correct as f64 / e.count as f64;
    }
    let total = predictions.len();
    EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_qtype,
        predictions,
        config_fingerprint: String::new(),
        dataset_fingerprint: String::new(),
        source_fingerprint: None,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("id,predicted,gold,qtype\n");
        for p in &self.predictions {
            let id = if p.id.contains([',', '"', '\n']) {
                format!("\"{}\"", p.id.replace('"', "\"\""))
            } else {
                p.id.clone()
            };
            writeln!(s, "{id},{},{},{}", p.predicted, p.gold, p.qtype).unwrap();
        }
        s
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!("accuracy {:.4} ({}/{})\n", self.accuracy, self.correct, self.total);
        for (k, v) in &self.per_qtype {
            writeln!(s, "  {k:<17} {:.4} ({}/{})", v.accuracy, v.correct, v.count).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
