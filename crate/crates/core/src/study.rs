//! Human-rater study: expert-set sampling, consensus labels, leave-one-out
//! scoring, group averages and per-condition agreement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crops::CropRef;
use crate::evaluation::PredictionSet;
use crate::labeling::{LabelBits, LabelMatrix};
use crate::metrics::{
    confusion_from_predictions, fleiss_kappa, mcc, ols_fit, AgreementTable, ConfusionCounts,
    MetricsError, RegressionFit,
};
use crate::report::FdiTooth;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(
        "condition {condition}: stratum {stratum} has {available} items, {requested} requested"
    )]
    StratumExhausted {
        condition: usize,
        stratum: Stratum,
        available: usize,
        requested: usize,
    },
    #[error("missing annotations: {}", .0.join(", "))]
    IncompleteAnnotations(Vec<String>),
    #[error("no raters in group {0}")]
    EmptyGroup(RaterGroup),
    #[error("leave-one-out needs at least 2 experts, found {0}")]
    TooFewExperts(usize),
    #[error("rater {rater} on {crop_id}: {found} labels, expected {expected}")]
    BadVectorLength {
        rater: String,
        crop_id: String,
        expected: usize,
        found: usize,
    },
    #[error("rater {rater} appears in groups {first} and {second}")]
    ConflictingGroup {
        rater: String,
        first: RaterGroup,
        second: RaterGroup,
    },
    #[error("predictions cover {found} conditions, labels {expected}")]
    ConditionCountMismatch { expected: usize, found: usize },
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

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterGroup {
    Student,
    Expert,
    Model,
}

impl fmt::Display for RaterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RaterGroup::Student => "student",
            RaterGroup::Expert => "expert",
            RaterGroup::Model => "model",
        })
    }
}

impl FromStr for RaterGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "student" => Ok(RaterGroup::Student),
            "expert" => Ok(RaterGroup::Expert),
            "model" => Ok(RaterGroup::Model),
            other => Err(format!("unknown rater group {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub rater_id: String,
    pub group: RaterGroup,
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub labels: LabelBits,
}

impl AnnotationRecord {
    pub fn crop_ref(&self) -> CropRef {
        CropRef::new(self.image_id.clone(), self.tooth)
    }
}

/// Current annotations, one per (rater, crop). Later records replace
/// earlier ones for the same pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    k: usize,
    groups: BTreeMap<String, RaterGroup>,
    labels: BTreeMap<(String, CropRef), LabelBits>,
}

impl AnnotationSet {
    pub fn new(k: usize) -> Self {
        AnnotationSet {
            k,
            ..Default::default()
        }
    }

    pub fn from_records(
        records: impl IntoIterator<Item = AnnotationRecord>,
        k: usize,
    ) -> Result<Self> {
        let mut set = Self::new(k);
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn from_jsonl(text: &str, k: usize) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| StudyError::Json {
                    line: i + 1,
                    source,
                })
            })
            .collect::<Result<Vec<AnnotationRecord>>>()?;
        Self::from_records(records, k)
    }

    /// Adds model predictions as a rater of group `Model`.
    pub fn add_predictions(
        &mut self,
        rater_id: &str,
        predictions: &PredictionSet,
        items: &[CropRef],
    ) -> Result<()> {
        if predictions.k() != self.k {
            return Err(StudyError::ConditionCountMismatch {
                expected: self.k,
                found: predictions.k(),
            });
        }
        for crop in items {
            if let Some(bits) = predictions.get(crop) {
                self.insert(AnnotationRecord {
                    rater_id: rater_id.into(),
                    group: RaterGroup::Model,
                    image_id: crop.image_id.clone(),
                    tooth: crop.tooth,
                    labels: bits.clone(),
                })?;
            }
        }
        Ok(())
    }

    /// Checks that `record` could be inserted without changing anything.
    pub fn validate(&self, record: &AnnotationRecord) -> Result<()> {
        if record.labels.len() != self.k {
            return Err(StudyError::BadVectorLength {
                rater: record.rater_id.clone(),
                crop_id: record.crop_ref().crop_id(),
                expected: self.k,
                found: record.labels.len(),
            });
        }
        match self.groups.get(&record.rater_id) {
            Some(&g) if g != record.group => Err(StudyError::ConflictingGroup {
                rater: record.rater_id.clone(),
                first: g,
                second: record.group,
            }),
            _ => Ok(()),
        }
    }

    pub fn insert(&mut self, record: AnnotationRecord) -> Result<()> {
        self.validate(&record)?;
        self.groups
            .entry(record.rater_id.clone())
            .or_insert(record.group);
        let crop = record.crop_ref();
        self.labels.insert((record.rater_id, crop), record.labels);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn group_of(&self, rater: &str) -> Option<RaterGroup> {
        self.groups.get(rater).copied()
    }

    /// Rater ids, optionally restricted to one group, in sorted order.
    pub fn raters(&self, group: Option<RaterGroup>) -> Vec<String> {
        self.groups
            .iter()
            .filter(|(_, g)| group.is_none_or(|want| **g == want))
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn get(&self, rater: &str, crop: &CropRef) -> Option<&LabelBits> {
        self.labels.get(&(rater.to_string(), crop.clone()))
    }

    pub fn is_complete(&self, rater: &str, items: &[CropRef]) -> bool {
        items.iter().all(|c| self.get(rater, c).is_some())
    }

    pub fn complete_raters(&self, items: &[CropRef], group: Option<RaterGroup>) -> Vec<String> {
        self.raters(group)
            .into_iter()
            .filter(|r| self.is_complete(r, items))
            .collect()
    }

    fn require_complete(&self, raters: &[String], items: &[CropRef]) -> Result<()> {
        let missing: Vec<String> = raters
            .iter()
            .flat_map(|r| {
                items
                    .iter()
                    .filter(move |c| self.get(r, c).is_none())
                    .map(move |c| format!("{r}/{c}"))
            })
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(StudyError::IncompleteAnnotations(missing))
        }
    }

    pub fn records(&self) -> impl Iterator<Item = AnnotationRecord> + '_ {
        self.labels
            .iter()
            .map(|((rater, crop), labels)| AnnotationRecord {
                rater_id: rater.clone(),
                group: self.groups[rater],
                image_id: crop.image_id.clone(),
                tooth: crop.tooth,
                labels: labels.clone(),
            })
    }

    pub fn to_jsonl(&self) -> String {
        self.records()
            .map(|r| serde_json::to_string(&r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stratum {
    Tp,
    Fp,
    Fn,
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::Tp => "TP",
            Stratum::Fp => "FP",
            Stratum::Fn => "FN",
        })
    }
}

impl Stratum {
    /// Stratum of a (prediction, label) pair; true negatives have none.
    pub fn of(predicted: bool, label: bool) -> Option<Stratum> {
        match (predicted, label) {
            (true, true) => Some(Stratum::Tp),
            (true, false) => Some(Stratum::Fp),
            (false, true) => Some(Stratum::Fn),
            (false, false) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Default for StratumCounts {
    fn default() -> Self {
        StratumCounts {
            tp: 2,
            fp: 2,
            fn_: 2,
        }
    }
}

impl StratumCounts {
    pub fn get(&self, s: Stratum) -> usize {
        match s {
            Stratum::Tp => self.tp,
            Stratum::Fp => self.fp,
            Stratum::Fn => self.fn_,
        }
    }

    pub fn per_condition(&self) -> usize {
        self.tp + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertItem {
    pub crop_id: String,
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub condition: usize,
    pub stratum: Stratum,
}

impl ExpertItem {
    pub fn crop_ref(&self) -> CropRef {
        CropRef::new(self.image_id.clone(), self.tooth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertImageDataset {
    pub items: Vec<ExpertItem>,
    pub seed: u64,
    pub per_condition: StratumCounts,
}

impl ExpertImageDataset {
    pub fn crops(&self) -> Vec<CropRef> {
        self.items.iter().map(ExpertItem::crop_ref).collect()
    }
}

/// Draws TP/FP/FN crops per condition, with strata taken from the model's
/// hard predictions against report labels. Conditions are visited in index
/// order and a crop chosen for one condition is unavailable to later ones.
pub fn sample_expert_set(
    predictions: &PredictionSet,
    labels: &LabelMatrix,
    candidates: Option<&BTreeSet<CropRef>>,
    per_condition: StratumCounts,
    seed: u64,
) -> Result<ExpertImageDataset> {
    let k = labels.vocabulary.len();
    if predictions.k() != k {
        return Err(StudyError::ConditionCountMismatch {
            expected: k,
            found: predictions.k(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<CropRef> = BTreeSet::new();
    let mut items = Vec::with_capacity(k * per_condition.per_condition());
    for condition in 1..=k {
        for stratum in [Stratum::Tp, Stratum::Fp, Stratum::Fn] {
            let requested = per_condition.get(stratum);
            let pool: Vec<&CropRef> = predictions
                .iter()
                .filter(|(c, _)| candidates.is_none_or(|s| s.contains(*c)) && !chosen.contains(*c))
                .filter(|(c, p)| {
                    Stratum::of(
                        p.get(condition),
                        labels.label(&c.image_id, c.tooth, condition),
                    ) == Some(stratum)
                })
                .map(|(c, _)| c)
                .collect();
            if pool.len() < requested {
                return Err(StudyError::StratumExhausted {
                    condition,
                    stratum,
                    available: pool.len(),
                    requested,
                });
            }
            for i in sample(&mut rng, pool.len(), requested) {
                let crop = pool[i].clone();
                items.push(ExpertItem {
                    crop_id: crop.crop_id(),
                    image_id: crop.image_id.clone(),
                    tooth: crop.tooth,
                    condition,
                    stratum,
                });
                chosen.insert(crop);
            }
        }
    }
    Ok(ExpertImageDataset {
        items,
        seed,
        per_condition,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    #[default]
    Negative,
    Positive,
}

/// Per-condition strict majority; exact ties follow `policy`. All vectors
/// must have the same length.
pub fn majority_vote(votes: &[&LabelBits], policy: TiePolicy) -> LabelBits {
    let Some(first) = votes.first() else {
        return LabelBits::zeros(0);
    };
    let n = votes.len();
    let mut out = LabelBits::zeros(first.len());
    for c in 1..=first.len() {
        let positive = votes.iter().filter(|v| v.get(c)).count();
        let decision = match (2 * positive).cmp(&n) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => policy == TiePolicy::Positive,
        };
        out.set(c, decision);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusGroundTruth {
    pub labels: BTreeMap<CropRef, LabelBits>,
    pub raters: Vec<String>,
    pub tie_policy: TiePolicy,
}

#[derive(Serialize)]
struct ConsensusLine<'a> {
    crop_id: String,
    image_id: &'a str,
    fdi: FdiTooth,
    labels: &'a LabelBits,
    raters: &'a [String],
}

impl ConsensusGroundTruth {
    pub fn frequency(&self, condition: usize) -> usize {
        self.labels.values().filter(|b| b.get(condition)).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.labels
            .iter()
            .map(|(c, labels)| {
                let line = ConsensusLine {
                    crop_id: c.crop_id(),
                    image_id: &c.image_id,
                    fdi: c.tooth,
                    labels,
                    raters: &self.raters,
                };
                serde_json::to_string(&line).expect("consensus serializes") + "\n"
            })
            .collect()
    }
}

/// Majority-vote consensus of `raters` over `items`.
pub fn consensus(
    annotations: &AnnotationSet,
    raters: &[String],
    items: &[CropRef],
    policy: TiePolicy,
) -> Result<ConsensusGroundTruth> {
    annotations.require_complete(raters, items)?;
    let labels = items
        .iter()
        .map(|c| {
            let votes: Vec<&LabelBits> = raters
                .iter()
                .map(|r| annotations.get(r, c).expect("checked"))
                .collect();
            (c.clone(), majority_vote(&votes, policy))
        })
        .collect();
    Ok(ConsensusGroundTruth {
        labels,
        raters: raters.to_vec(),
        tie_policy: policy,
    })
}

fn condition_confusion(
    annotations: &AnnotationSet,
    rater: &str,
    truth: &ConsensusGroundTruth,
    condition: usize,
) -> Result<ConfusionCounts> {
    let (pred, gold): (Vec<bool>, Vec<bool>) = truth
        .labels
        .iter()
        .map(|(c, t)| {
            (
                annotations.get(rater, c).expect("checked").get(condition),
                t.get(condition),
            )
        })
        .unzip();
    Ok(confusion_from_predictions(&pred, &gold)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterScore {
    pub rater_id: String,
    pub group: RaterGroup,
    /// Raters whose consensus served as ground truth.
    pub reference: Vec<String>,
    pub per_condition: Vec<f64>,
    pub mean_mcc: f64,
}

fn score_rater(
    annotations: &AnnotationSet,
    rater: &str,
    truth: &ConsensusGroundTruth,
) -> Result<RaterScore> {
    let per_condition = (1..=annotations.k)
        .map(|c| Ok(mcc(&condition_confusion(annotations, rater, truth, c)?)?))
        .collect::<Result<Vec<f64>>>()?;
    let mean_mcc = per_condition.iter().sum::<f64>() / per_condition.len().max(1) as f64;
    Ok(RaterScore {
        rater_id: rater.into(),
        group: annotations.groups[rater],
        reference: truth.raters.clone(),
        per_condition,
        mean_mcc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOutReport {
    /// One round per expert, naming the excluded expert.
    pub rounds: Vec<String>,
    pub scores: Vec<RaterScore>,
}

/// Scores each expert against the consensus of the remaining experts, and
/// every other rater (students, models) against the consensus of all
/// experts. MCC is averaged over all conditions per rater.
pub fn leave_one_out_eval(
    annotations: &AnnotationSet,
    items: &[CropRef],
    policy: TiePolicy,
) -> Result<LeaveOneOutReport> {
    let experts = annotations.raters(Some(RaterGroup::Expert));
    if experts.len() < 2 {
        return Err(StudyError::TooFewExperts(experts.len()));
    }
    let all = annotations.raters(None);
    annotations.require_complete(&all, items)?;
    let mut scores = Vec::with_capacity(all.len());
    for expert in &experts {
        let others: Vec<String> = experts.iter().filter(|e| *e != expert).cloned().collect();
        let truth = consensus(annotations, &others, items, policy)?;
        scores.push(score_rater(annotations, expert, &truth)?);
    }
    let truth = consensus(annotations, &experts, items, policy)?;
    for rater in all
        .iter()
        .filter(|r| annotations.groups[*r] != RaterGroup::Expert)
    {
        scores.push(score_rater(annotations, rater, &truth)?);
    }
    Ok(LeaveOneOutReport {
        rounds: experts,
        scores,
    })
}

/// Arithmetic mean of the values belonging to `group`.
pub fn group_average(values: &[(RaterGroup, f64)], group: RaterGroup) -> Result<f64> {
    let selected: Vec<f64> = values
        .iter()
        .filter(|(g, _)| *g == group)
        .map(|(_, v)| *v)
        .collect();
    if selected.is_empty() {
        return Err(StudyError::EmptyGroup(group));
    }
    Ok(selected.iter().sum::<f64>() / selected.len() as f64)
}

impl LeaveOneOutReport {
    pub fn group_means(&self) -> BTreeMap<RaterGroup, f64> {
        let values: Vec<(RaterGroup, f64)> =
            self.scores.iter().map(|s| (s.group, s.mean_mcc)).collect();
        [RaterGroup::Student, RaterGroup::Expert, RaterGroup::Model]
            .into_iter()
            .filter_map(|g| group_average(&values, g).ok().map(|m| (g, m)))
            .collect()
    }

    pub fn to_csv(&self, condition_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rater".to_string(), "group".to_string()];
        header.extend(condition_names.iter().cloned());
        header.push("average".into());
        w.write_record(&header)?;
        for s in &self.scores {
            let mut row = vec![s.rater_id.clone(), s.group.to_string()];
            row.extend(s.per_condition.iter().map(|v| format!("{v:.6}")));
            row.push(format!("{:.6}", s.mean_mcc));
            w.write_record(&row)?;
        }
        for (g, m) in self.group_means() {
            let mut row = vec![format!("all {g}s"), g.to_string()];
            row.extend(condition_names.iter().map(|_| String::new()));
            row.push(format!("{m:.6}"));
            w.write_record(&row)?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionKappa {
    pub condition: usize,
    /// `None` when agreement is degenerate (every rating in one category).
    pub kappa: Option<f64>,
    pub degenerate: bool,
}

/// Binary Fleiss' kappa per condition over `raters`, all of whom must have
/// rated every item.
pub fn kappa_per_condition(
    annotations: &AnnotationSet,
    raters: &[String],
    items: &[CropRef],
) -> Result<Vec<ConditionKappa>> {
    annotations.require_complete(raters, items)?;
    (1..=annotations.k)
        .map(|c| {
            let counts: Vec<Vec<u32>> = items
                .iter()
                .map(|item| {
                    let pos = raters
                        .iter()
                        .filter(|r| annotations.get(r, item).expect("checked").get(c))
                        .count() as u32;
                    vec![raters.len() as u32 - pos, pos]
                })
                .collect();
            match fleiss_kappa(&AgreementTable::new(counts)?) {
                Ok(k) => Ok(ConditionKappa {
                    condition: c,
                    kappa: Some(k),
                    degenerate: false,
                }),
                Err(MetricsError::DegenerateAgreement) => Ok(ConditionKappa {
                    condition: c,
                    kappa: None,
                    degenerate: true,
                }),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMcc {
    /// Mean of per-rater MCCs.
    pub mean: f64,
    /// MCC of the confusion counts summed over raters.
    pub pooled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAnalysis {
    pub condition: usize,
    pub frequency: usize,
    pub kappa: Option<f64>,
    pub degenerate: bool,
    pub mcc: BTreeMap<RaterGroup, GroupMcc>,
}

/// Frequency under consensus, expert kappa, and MCC per rater group against
/// `truth`, for every condition.
pub fn per_condition_analysis(
    annotations: &AnnotationSet,
    truth: &ConsensusGroundTruth,
) -> Result<Vec<ConditionAnalysis>> {
    let items: Vec<CropRef> = truth.labels.keys().cloned().collect();
    let experts = annotations.raters(Some(RaterGroup::Expert));
    let kappas = kappa_per_condition(annotations, &experts, &items)?;
    let all = annotations.raters(None);
    annotations.require_complete(&all, &items)?;
    let mut out = Vec::with_capacity(annotations.k);
    for (c, kappa) in (1..=annotations.k).zip(kappas) {
        let mut by_group: BTreeMap<RaterGroup, (Vec<f64>, ConfusionCounts)> = BTreeMap::new();
        for rater in &all {
            let counts = condition_confusion(annotations, rater, truth, c)?;
            let entry = by_group
                .entry(annotations.groups[rater])
                .or_insert_with(|| (Vec::new(), ConfusionCounts::default()));
            entry.0.push(mcc(&counts)?);
            entry.1 = entry.1 + counts;
        }
        let mcc_by_group = by_group
            .into_iter()
            .map(|(g, (values, pooled))| {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                Ok((
                    g,
                    GroupMcc {
                        mean,
                        pooled: mcc(&pooled)?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        out.push(ConditionAnalysis {
            condition: c,
            frequency: truth.frequency(c),
            kappa: kappa.kappa,
            degenerate: kappa.degenerate,
            mcc: mcc_by_group,
        });
    }
    Ok(out)
}

/// One point of the kappa / frequency / MCC scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub frequency: f64,
    pub kappa: f64,
    pub mcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFits {
    pub kappa_only: RegressionFit,
    pub kappa_and_frequency: RegressionFit,
}

/// MCC regressed on kappa, and on kappa plus frequency, both with intercept.
pub fn trend_fits(points: &[TrendPoint]) -> Result<TrendFits> {
    let y: Vec<f64> = points.iter().map(|p| p.mcc).collect();
    let x1: Vec<Vec<f64>> = points.iter().map(|p| vec![p.kappa]).collect();
    let x2: Vec<Vec<f64>> = points.iter().map(|p| vec![p.kappa, p.frequency]).collect();
    Ok(TrendFits {
        kappa_only: ols_fit(&x1, &y, true)?,
        kappa_and_frequency: ols_fit(&x2, &y, true)?,
    })
}

impl ConditionAnalysis {
    /// Scatter point for `group`; degenerate kappa is skipped.
    pub fn trend_point(&self, group: RaterGroup) -> Option<TrendPoint> {
        Some(TrendPoint {
            frequency: self.frequency as f64,
            kappa: self.kappa?,
            mcc: self.mcc.get(&group)?.mean,
        })
    }
}

pub fn analysis_to_csv(rows: &[ConditionAnalysis], condition_names: &[String]) -> Result<String> {
    let groups = [RaterGroup::Student, RaterGroup::Expert, RaterGroup::Model];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "index".to_string(),
        "condition".into(),
        "frequency".into(),
        "kappa".into(),
    ];
    for g in groups {
        header.push(format!("{g}_mcc_mean"));
        header.push(format!("{g}_mcc_pooled"));
    }
    w.write_record(&header)?;
    for r in rows {
        let name = condition_names
            .get(r.condition - 1)
            .cloned()
            .unwrap_or_default();
        let mut row = vec![
            r.condition.to_string(),
            name,
            r.frequency.to_string(),
            r.kappa
                .map(|k| format!("{k:.6}"))
                .unwrap_or_else(|| "n/a".into()),
        ];
        for g in groups {
            match r.mcc.get(&g) {
                Some(m) => {
                    row.push(format!("{:.6}", m.mean));
                    row.push(format!("{:.6}", m.pooled));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}
