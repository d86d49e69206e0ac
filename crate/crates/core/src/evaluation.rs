//! Scoring classifier predictions against report-derived labels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crops::CropRef;
use crate::labeling::{LabelBits, LabelMatrix};
use crate::metrics::{
    bce, combined_loss, confusion_from_predictions, mcc, ConfusionCounts, LossConfig, MetricsError,
};
use crate::report::FdiTooth;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for {crop_id} has {found} conditions, expected {expected}")]
    BadVectorLength {
        crop_id: String,
        expected: usize,
        found: usize,
    },
    #[error("probabilities for {0} must lie in [0, 1]")]
    InvalidProbability(String),
    #[error("duplicate prediction for {0}")]
    DuplicatePrediction(String),
    #[error("no predictions to evaluate")]
    Empty,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One line of a predictions file: hard decisions for every condition of
/// one crop, optionally with the probabilities they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub predictions: LabelBits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

/// Hard predictions keyed by crop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    k: usize,
    by_crop: BTreeMap<CropRef, LabelBits>,
    probabilities: BTreeMap<CropRef, Vec<f64>>,
}

impl PredictionSet {
    pub fn new(records: Vec<PredictionRecord>, k: usize) -> Result<Self> {
        let mut by_crop = BTreeMap::new();
        let mut probabilities = BTreeMap::new();
        for r in records {
            let crop = CropRef::new(r.image_id, r.tooth);
            if r.predictions.len() != k {
                return Err(EvalError::BadVectorLength {
                    crop_id: crop.crop_id(),
                    expected: k,
                    found: r.predictions.len(),
                });
            }
            let id = crop.crop_id();
            if let Some(p) = r.probabilities {
                if p.len() != k {
                    return Err(EvalError::BadVectorLength {
                        crop_id: id,
                        expected: k,
                        found: p.len(),
                    });
                }
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(EvalError::InvalidProbability(id));
                }
                probabilities.insert(crop.clone(), p);
            }
            if by_crop.insert(crop, r.predictions).is_some() {
                return Err(EvalError::DuplicatePrediction(id));
            }
        }
        Ok(PredictionSet {
            k,
            by_crop,
            probabilities,
        })
    }

    pub fn from_jsonl(text: &str, k: usize) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| EvalError::Json {
                    line: i + 1,
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, k)
    }

    /// Predictions that reproduce the label matrix exactly.
    pub fn from_labels(labels: &LabelMatrix) -> Self {
        PredictionSet {
            k: labels.vocabulary.len(),
            by_crop: labels
                .records
                .iter()
                .map(|r| (CropRef::new(r.image_id.clone(), r.tooth), r.labels.clone()))
                .collect(),
            probabilities: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.by_crop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_crop.is_empty()
    }

    pub fn get(&self, crop: &CropRef) -> Option<&LabelBits> {
        self.by_crop.get(crop)
    }

    pub fn probabilities(&self, crop: &CropRef) -> Option<&[f64]> {
        self.probabilities.get(crop).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CropRef, &LabelBits)> {
        self.by_crop.iter()
    }

    pub fn to_jsonl(&self) -> String {
        self.by_crop
            .iter()
            .map(|(c, bits)| {
                let rec = PredictionRecord {
                    image_id: c.image_id.clone(),
                    tooth: c.tooth,
                    predictions: bits.clone(),
                    probabilities: self.probabilities.get(c).cloned(),
                };
                serde_json::to_string(&rec).expect("prediction serializes") + "\n"
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub index: usize,
    pub name: String,
    pub counts: ConfusionCounts,
    pub mcc: f64,
    /// Present when every evaluated crop came with probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_crops: usize,
    pub conditions: Vec<ConditionScore>,
    pub mean_mcc: f64,
}

/// Per-condition MCC of `predictions` against `labels`, restricted to
/// `subset` when given. Crops without a label record count as all-negative.
/// BCE and the combined loss are added when probabilities are available.
pub fn evaluate(
    predictions: &PredictionSet,
    labels: &LabelMatrix,
    subset: Option<&BTreeSet<CropRef>>,
    loss: &LossConfig,
) -> Result<EvaluationReport> {
    loss.validate()?;
    let k = labels.vocabulary.len();
    if predictions.k != k {
        return Err(EvalError::BadVectorLength {
            crop_id: "<predictions>".into(),
            expected: k,
            found: predictions.k,
        });
    }
    let crops: Vec<(&CropRef, &LabelBits)> = predictions
        .iter()
        .filter(|(c, _)| subset.is_none_or(|s| s.contains(*c)))
        .collect();
    if crops.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut conditions = Vec::with_capacity(k);
    for cond in &labels.vocabulary.conditions {
        let pred: Vec<bool> = crops.iter().map(|(_, p)| p.get(cond.index)).collect();
        let truth: Vec<bool> = crops
            .iter()
            .map(|(c, _)| labels.label(&c.image_id, c.tooth, cond.index))
            .collect();
        let counts = confusion_from_predictions(&pred, &truth)?;
        let probs: Option<Vec<f64>> = crops
            .iter()
            .map(|(c, _)| predictions.probabilities(c).map(|p| p[cond.index - 1]))
            .collect();
        let (bce_value, loss_value) = match probs {
            Some(p) => {
                let y: Vec<f64> = truth.iter().map(|&t| t as u8 as f64).collect();
                (
                    Some(bce(&y, &p, loss.clamp)?),
                    Some(combined_loss(&y, &p, loss)?),
                )
            }
            None => (None, None),
        };
        conditions.push(ConditionScore {
            index: cond.index,
            name: cond.name.clone(),
            counts,
            mcc: mcc(&counts)?,
            bce: bce_value,
            loss: loss_value,
        });
    }
    let mean_mcc = conditions.iter().map(|c| c.mcc).sum::<f64>() / k as f64;
    Ok(EvaluationReport {
        n_crops: crops.len(),
        conditions,
        mean_mcc,
    })
}

impl EvaluationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "condition", "tp", "fp", "fn", "tn", "mcc"])?;
        for c in &self.conditions {
            w.write_record([
                c.index.to_string(),
                c.name.clone(),
                c.counts.tp.to_string(),
                c.counts.fp.to_string(),
                c.counts.fn_.to_string(),
                c.counts.tn.to_string(),
                format!("{:.6}", c.mcc),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{ConditionVocabulary, Provenance, ToothLabelRecord};
    use crate::report::validate_fdi;

    fn matrix() -> LabelMatrix {
        let vocabulary = ConditionVocabulary::dental_default();
        let k = vocabulary.len();
        let records = (0..8)
            .map(|i| ToothLabelRecord {
                image_id: format!("img{i}"),
                tooth: validate_fdi(36).unwrap(),
                labels: LabelBits::from_indices(k, if i % 2 == 0 { &[1] } else { &[2, 3] }),
            })
            .collect();
        LabelMatrix {
            vocabulary,
            records,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn perfect_predictions_score_one_where_defined() {
        let labels = matrix();
        let preds = PredictionSet::from_labels(&labels);
        let report = evaluate(&preds, &labels, None, &LossConfig::default()).unwrap();
        assert_eq!(report.n_crops, 8);
        for c in &report.conditions {
            let expected = if c.index <= 3 { 1.0 } else { 0.0 };
            assert_eq!(c.mcc, expected, "condition {}", c.index);
        }
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with(
            "index,condition,tp,fp,fn,tn,mcc\n1,endodontic treatment,4,0,0,4,1.000000\n"
        ));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let labels = matrix();
        let preds = PredictionSet::from_labels(&labels);
        let back = PredictionSet::from_jsonl(&preds.to_jsonl(), 13).unwrap();
        assert_eq!(back, preds);
        assert!(matches!(
            PredictionSet::from_jsonl(&preds.to_jsonl(), 12),
            Err(EvalError::BadVectorLength { .. })
        ));
        let dup = preds.to_jsonl().lines().next().unwrap().to_string() + "\n";
        assert!(matches!(
            PredictionSet::from_jsonl(&dup.repeat(2), 13),
            Err(EvalError::DuplicatePrediction(_))
        ));
        assert!(matches!(
            PredictionSet::from_jsonl("{", 13),
            Err(EvalError::Json { line: 1, .. })
        ));
    }

    #[test]
    fn probabilities_add_losses() {
        let labels = matrix();
        let records: Vec<PredictionRecord> = labels
            .records
            .iter()
            .map(|r| PredictionRecord {
                image_id: r.image_id.clone(),
                tooth: r.tooth,
                predictions: r.labels.clone(),
                probabilities: Some(vec![0.5; 13]),
            })
            .collect();
        let preds = PredictionSet::new(records, 13).unwrap();
        let report = evaluate(&preds, &labels, None, &LossConfig::default()).unwrap();
        let first = &report.conditions[0];
        assert!((first.bce.unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((first.loss.unwrap() - (0.5 * std::f64::consts::LN_2 + 0.5)).abs() < 1e-9);
        assert!(PredictionSet::from_jsonl(&preds.to_jsonl(), 13)
            .unwrap()
            .probabilities(&CropRef::new("img0", validate_fdi(36).unwrap()))
            .is_some());
        let bad = PredictionRecord {
            image_id: "x".into(),
            tooth: validate_fdi(11).unwrap(),
            predictions: LabelBits::zeros(13),
            probabilities: Some(vec![1.5; 13]),
        };
        assert!(matches!(
            PredictionSet::new(vec![bad], 13),
            Err(EvalError::InvalidProbability(_))
        ));
    }

    #[test]
    fn subset_restricts_crops() {
        let labels = matrix();
        let preds = PredictionSet::from_labels(&labels);
        let subset: BTreeSet<CropRef> = [CropRef::new("img0", validate_fdi(36).unwrap())].into();
        assert_eq!(
            evaluate(&preds, &labels, Some(&subset), &LossConfig::default())
                .unwrap()
                .n_crops,
            1
        );
        assert!(matches!(
            evaluate(
                &preds,
                &labels,
                Some(&BTreeSet::new()),
                &LossConfig::default()
            ),
            Err(EvalError::Empty)
        ));
    }
}
