//! Condition vocabulary and per-tooth label generation.
//!
//! Phrase frequencies are counted over the corpus after folding synonyms,
//! conditions are kept when they clear the count threshold and appear on the
//! allowlist, and each report line then links every tooth it mentions to every
//! condition it names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::phrases::{normalize, NounPhrase, PhraseSet};
use crate::report::{Corpus, FdiTooth, ReportLine};

pub const DEFAULT_SYNONYMS: &str = include_str!("../assets/synonyms.json");
pub const DEFAULT_ALLOWLIST: &str = include_str!("../assets/allowlist.json");
const REFERENCE_CONDITIONS: &str = include_str!("../assets/conditions.json");

pub const DEFAULT_MIN_COUNT: u64 = 150;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no phrase passed both the count threshold and the allowlist")]
    EmptyVocabulary,
    #[error("allowlist is empty")]
    EmptyAllowlist,
    #[error("variant {variant:?} is listed under both {first:?} and {second:?}")]
    OverlappingSynonyms {
        variant: String,
        first: String,
        second: String,
    },
    #[error(
        "report {report_id} references image {image_id} which is not in the segmentation manifest"
    )]
    UnknownImage { report_id: String, image_id: String },
    #[error("label vector has length {found}, vocabulary has {expected} conditions")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid asset: {0}")]
    Asset(#[from] serde_json::Error),
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

/// Binary label vector; serialized as a list of 0/1 integers. Booleans are
/// accepted on input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelBits(pub Vec<bool>);

impl LabelBits {
    pub fn zeros(len: usize) -> Self {
        LabelBits(vec![false; len])
    }

    pub fn from_indices(len: usize, one_based: &[usize]) -> Self {
        let mut bits = Self::zeros(len);
        for &i in one_based {
            bits.0[i - 1] = true;
        }
        bits
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based condition index.
    pub fn get(&self, index: usize) -> bool {
        index >= 1 && self.0.get(index - 1).copied().unwrap_or(false)
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.0[index - 1] = value;
    }

    pub fn union_with(&mut self, other: &LabelBits) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= *b;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn ones(&self) -> Vec<usize> {
        (1..=self.0.len()).filter(|&i| self.get(i)).collect()
    }
}

impl Serialize for LabelBits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| b as u8))
    }
}

impl<'de> Deserialize<'de> for LabelBits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct BitsVisitor;

        impl<'de> Visitor<'de> for BitsVisitor {
            type Value = LabelBits;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a list of 0/1 or booleans")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<LabelBits, A::Error> {
                #[derive(Deserialize)]
                #[serde(untagged)]
                enum Bit {
                    Bool(bool),
                    Int(u64),
                }
                let mut bits = Vec::new();
                while let Some(bit) = seq.next_element::<Bit>()? {
                    bits.push(match bit {
                        Bit::Bool(b) => b,
                        Bit::Int(0) => false,
                        Bit::Int(1) => true,
                        Bit::Int(n) => {
                            return Err(de::Error::custom(format!(
                                "label bit must be 0 or 1, got {n}"
                            )))
                        }
                    });
                }
                Ok(LabelBits(bits))
            }
        }

        d.deserialize_seq(BitsVisitor)
    }
}

/// Folds normalized phrase variants onto canonical condition names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    to_canonical: BTreeMap<String, String>,
}

impl SynonymMap {
    /// Builds from `canonical -> [variants]` groups. Groups must not share
    /// variants.
    pub fn from_groups(groups: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut to_canonical: BTreeMap<String, String> = BTreeMap::new();
        for (canonical, variants) in groups {
            let canonical = normalize(canonical);
            for v in std::iter::once(&canonical).chain(variants.iter()) {
                let v = normalize(v);
                match to_canonical.get(&v) {
                    Some(existing) if *existing != canonical => {
                        return Err(LabelError::OverlappingSynonyms {
                            variant: v,
                            first: existing.clone(),
                            second: canonical.clone(),
                        })
                    }
                    _ => {
                        to_canonical.insert(v, canonical.clone());
                    }
                }
            }
        }
        Ok(SynonymMap { to_canonical })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_groups(&serde_json::from_str(text)?)
    }

    /// The bundled dental-condition groups (plural folding and the
    /// "partially filled root canals" grouping).
    pub fn dental_default() -> Self {
        Self::from_json(DEFAULT_SYNONYMS).expect("bundled synonym map is valid")
    }

    pub fn canonical(&self, normalized: &str) -> String {
        self.to_canonical
            .get(normalized)
            .cloned()
            .unwrap_or_else(|| normalized.to_string())
    }

    pub fn variants_of(&self, canonical: &str) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self
            .to_canonical
            .iter()
            .filter(|(_, c)| c.as_str() == canonical)
            .map(|(v, _)| v.clone())
            .collect();
        set.insert(canonical.to_string());
        set
    }

    /// Every variant that spans more than one word, useful as protected
    /// terms for the rule-based chunker.
    pub fn multiword_terms(&self) -> Vec<String> {
        self.to_canonical
            .keys()
            .filter(|k| k.contains(' '))
            .cloned()
            .collect()
    }
}

pub fn default_allowlist() -> BTreeSet<String> {
    let names: Vec<String> =
        serde_json::from_str(DEFAULT_ALLOWLIST).expect("bundled allowlist is valid");
    names.iter().map(|n| normalize(n)).collect()
}

/// Canonical phrase counts.
pub type FrequencyTable = BTreeMap<String, u64>;

/// Counts canonical phrases over non-excluded lines, ignoring tooth mentions.
pub fn count_phrases(
    corpus: &Corpus,
    phrases: &PhraseSet,
    synonyms: &SynonymMap,
) -> FrequencyTable {
    let mut table = FrequencyTable::new();
    for report in &corpus.reports {
        let Some(rp) = phrases.get(&report.report_id) else {
            continue;
        };
        for line in report.lines.iter().filter(|l| !l.excluded) {
            let Some(lp) = rp.line(line.topic) else {
                continue;
            };
            for p in lp.phrases.iter().filter(|p| !p.is_tooth_mention) {
                *table.entry(synonyms.canonical(&p.normalized)).or_default() += 1;
            }
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub index: usize,
    pub name: String,
    pub synonyms: BTreeSet<String>,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVocabulary {
    pub conditions: Vec<Condition>,
    pub min_count: u64,
}

/// Keeps canonical phrases with `count > min_count` that are allowlisted,
/// ordered by descending count (ties by name) and numbered from 1.
pub fn build_vocabulary(
    frequencies: &FrequencyTable,
    min_count: u64,
    allowlist: &BTreeSet<String>,
    synonyms: &SynonymMap,
) -> Result<ConditionVocabulary> {
    if allowlist.is_empty() {
        return Err(LabelError::EmptyAllowlist);
    }
    let allow: BTreeSet<String> = allowlist.iter().map(|a| normalize(a)).collect();
    let mut kept: Vec<(&String, u64)> = frequencies
        .iter()
        .filter(|(name, &count)| count > min_count && allow.contains(*name))
        .map(|(name, &count)| (name, count))
        .collect();
    if kept.is_empty() {
        return Err(LabelError::EmptyVocabulary);
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let conditions = kept
        .into_iter()
        .enumerate()
        .map(|(i, (name, frequency))| Condition {
            index: i + 1,
            name: name.clone(),
            synonyms: synonyms.variants_of(name),
            frequency,
        })
        .collect();
    Ok(ConditionVocabulary {
        conditions,
        min_count,
    })
}

#[derive(Deserialize)]
struct ReferenceCondition {
    name: String,
    frequency: u64,
}

impl ConditionVocabulary {
    /// The thirteen dental conditions with their reference corpus counts.
    pub fn dental_default() -> Self {
        let reference: Vec<ReferenceCondition> =
            serde_json::from_str(REFERENCE_CONDITIONS).expect("bundled condition list is valid");
        let table: FrequencyTable = reference
            .into_iter()
            .map(|c| (c.name, c.frequency))
            .collect();
        build_vocabulary(
            &table,
            DEFAULT_MIN_COUNT,
            &default_allowlist(),
            &SynonymMap::dental_default(),
        )
        .expect("bundled vocabulary is non-empty")
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.conditions.iter().map(|c| c.name.as_str())
    }

    pub fn condition(&self, index: usize) -> Option<&Condition> {
        index.checked_sub(1).and_then(|i| self.conditions.get(i))
    }

    /// Exact lookup of a normalized phrase in the synonym sets.
    pub fn resolve(&self, normalized: &str) -> Option<usize> {
        self.conditions
            .iter()
            .find(|c| c.synonyms.contains(normalized))
            .map(|c| c.index)
    }
}

/// Every tooth of the line paired with every distinct condition its phrases
/// resolve to. Tooth-mention and unresolved phrases are dropped.
pub fn link_line(
    line: &ReportLine,
    phrases: &[NounPhrase],
    vocabulary: &ConditionVocabulary,
) -> Vec<(FdiTooth, usize)> {
    if line.excluded {
        return Vec::new();
    }
    let mut conditions: Vec<usize> = Vec::new();
    for p in phrases.iter().filter(|p| !p.is_tooth_mention) {
        if let Some(idx) = vocabulary.resolve(&p.normalized) {
            if !conditions.contains(&idx) {
                conditions.push(idx);
            }
        }
    }
    line.teeth
        .iter()
        .flat_map(|&t| conditions.iter().map(move |&c| (t, c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToothLabelRecord {
    pub image_id: String,
    #[serde(rename = "fdi")]
    pub tooth: FdiTooth,
    pub labels: LabelBits,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub reports: usize,
    pub extractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub vocabulary: ConditionVocabulary,
    /// Sorted by (image_id, tooth), one record per pair.
    pub records: Vec<ToothLabelRecord>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub vocabulary: ConditionVocabulary,
    pub positive_counts: Vec<u64>,
    pub records: usize,
    pub provenance: Provenance,
}

/// Teeth detected per image, used to add all-zero records for teeth that the
/// reports never mention.
pub type ToothIndex = BTreeMap<String, BTreeSet<FdiTooth>>;

pub fn build_label_matrix(
    corpus: &Corpus,
    phrases: &PhraseSet,
    vocabulary: &ConditionVocabulary,
    segmented: Option<&ToothIndex>,
) -> Result<LabelMatrix> {
    let k = vocabulary.len();
    let mut acc: BTreeMap<(String, FdiTooth), LabelBits> = BTreeMap::new();
    for report in &corpus.reports {
        if let Some(index) = segmented {
            if !index.contains_key(&report.image_id) {
                return Err(LabelError::UnknownImage {
                    report_id: report.report_id.clone(),
                    image_id: report.image_id.clone(),
                });
            }
        }
        let rp = phrases.get(&report.report_id);
        for line in &report.lines {
            let line_phrases = rp
                .and_then(|r| r.line(line.topic))
                .map(|l| l.phrases.as_slice())
                .unwrap_or(&[]);
            for (tooth, cond) in link_line(line, line_phrases, vocabulary) {
                acc.entry((report.image_id.clone(), tooth))
                    .or_insert_with(|| LabelBits::zeros(k))
                    .set(cond, true);
            }
        }
    }
    if let Some(index) = segmented {
        for (image_id, teeth) in index {
            for &tooth in teeth {
                acc.entry((image_id.clone(), tooth))
                    .or_insert_with(|| LabelBits::zeros(k));
            }
        }
    }
    Ok(LabelMatrix {
        vocabulary: vocabulary.clone(),
        records: acc
            .into_iter()
            .map(|((image_id, tooth), labels)| ToothLabelRecord {
                image_id,
                tooth,
                labels,
            })
            .collect(),
        provenance: Provenance {
            reports: corpus.reports.len(),
            extractors: phrases.extractors(),
        },
    })
}

impl LabelMatrix {
    pub fn get(&self, image_id: &str, tooth: FdiTooth) -> Option<&ToothLabelRecord> {
        self.records
            .binary_search_by(|r| (r.image_id.as_str(), r.tooth).cmp(&(image_id, tooth)))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Label for one condition; teeth without a record are negative.
    pub fn label(&self, image_id: &str, tooth: FdiTooth, condition: usize) -> bool {
        self.get(image_id, tooth)
            .is_some_and(|r| r.labels.get(condition))
    }

    pub fn positive_counts(&self) -> Vec<u64> {
        (1..=self.vocabulary.len())
            .map(|c| self.records.iter().filter(|r| r.labels.get(c)).count() as u64)
            .collect()
    }

    pub fn summary(&self) -> LabelSummary {
        LabelSummary {
            vocabulary: self.vocabulary.clone(),
            positive_counts: self.positive_counts(),
            records: self.records.len(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Rebuilds a matrix from its JSON Lines records and summary.
    pub fn from_parts(records_jsonl: &str, summary: &LabelSummary) -> Result<Self> {
        let k = summary.vocabulary.len();
        let mut records = records_jsonl
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<ToothLabelRecord>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(bad) = records.iter().find(|r| r.labels.len() != k) {
            return Err(LabelError::LengthMismatch {
                expected: k,
                found: bad.labels.len(),
            });
        }
        records.sort_by(|a, b| (&a.image_id, a.tooth).cmp(&(&b.image_id, b.tooth)));
        Ok(LabelMatrix {
            vocabulary: summary.vocabulary.clone(),
            records,
            provenance: summary.provenance.clone(),
        })
    }
}
