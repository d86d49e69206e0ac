//! Plain-text dental reports.
//!
//! A report is a sequence of topic lines, each prefixed by a two-digit topic
//! number and a colon:
//!
//! ```text
//! 03: Teeth 13 and 38 included and impacted.
//! 04: Tooth 36 and 37: endodontic treatment. Partially filled root canals.
//! ```
//!
//! Two-digit tokens inside a sentence denote teeth in FDI notation; every
//! other number in these reports is written out in words.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid FDI tooth code {0}")]
    InvalidFdiCode(u32),
    #[error("line {line}: missing two-digit topic prefix: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: duplicate topic number {topic:02}")]
    DuplicateTopicNumber { line: usize, topic: u8 },
    #[error("line {line}: topic number {topic:02} does not follow {previous:02}")]
    TopicOutOfOrder {
        line: usize,
        topic: u8,
        previous: u8,
    },
    #[error("invalid exclusion pattern {pattern:?}: {source}")]
    InvalidPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("exclusion pattern list is empty")]
    EmptyPatternSet,
    #[error("report {0} has no entry in the corpus manifest")]
    UnmappedReport(String),
    #[error("duplicate report id {0}")]
    DuplicateReport(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// A tooth in FDI two-digit notation.
///
/// Quadrants 1-4 hold permanent teeth (positions 1-8), quadrants 5-8 hold
/// deciduous teeth (positions 1-5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct FdiTooth {
    quadrant: u8,
    position: u8,
}

impl FdiTooth {
    pub fn quadrant(self) -> u8 {
        self.quadrant
    }

    pub fn position(self) -> u8 {
        self.position
    }

    pub fn code(self) -> u8 {
        self.quadrant * 10 + self.position
    }

    pub fn is_deciduous(self) -> bool {
        self.quadrant >= 5
    }

    /// Every valid code, permanent teeth first.
    pub fn all() -> impl Iterator<Item = FdiTooth> {
        (11..=85u32).filter_map(|c| validate_fdi(c).ok())
    }
}

/// Checks a two-digit FDI code.
pub fn validate_fdi(code: u32) -> Result<FdiTooth> {
    let quadrant = code / 10;
    let position = code % 10;
    let max_position = match quadrant {
        1..=4 => 8,
        5..=8 => 5,
        _ => return Err(ReportError::InvalidFdiCode(code)),
    };
    if !(1..=max_position).contains(&position) {
        return Err(ReportError::InvalidFdiCode(code));
    }
    Ok(FdiTooth {
        quadrant: quadrant as u8,
        position: position as u8,
    })
}

impl TryFrom<u32> for FdiTooth {
    type Error = ReportError;

    fn try_from(code: u32) -> Result<Self> {
        validate_fdi(code)
    }
}

impl From<FdiTooth> for u32 {
    fn from(t: FdiTooth) -> u32 {
        t.code() as u32
    }
}

impl fmt::Display for FdiTooth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.quadrant, self.position)
    }
}

impl FromStr for FdiTooth {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 2 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ReportError::InvalidFdiCode(s.parse().unwrap_or(0)));
        }
        validate_fdi(s.parse().expect("two ascii digits"))
    }
}

/// A two-digit token that looked like a tooth mention but is not a valid code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToothWarning {
    pub line: usize,
    pub token: String,
}

/// Result of scanning a sentence for tooth mentions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToothScan {
    pub teeth: Vec<FdiTooth>,
    pub rejected: Vec<String>,
}

/// Scans a sentence for standalone two-digit tokens.
///
/// A token is standalone when it is not adjacent to a letter, another digit,
/// or a decimal separator followed by a digit (`2.36` is not tooth 36).
pub fn scan_teeth(sentence: &str) -> ToothScan {
    let chars: Vec<char> = sentence.chars().collect();
    let mut scan = ToothScan::default();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        if i - start != 2 {
            continue;
        }
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i).copied();
        if before.is_some_and(char::is_alphanumeric) || after.is_some_and(char::is_alphanumeric) {
            continue;
        }
        let decimal_before = before == Some('.') && start >= 2 && chars[start - 2].is_ascii_digit();
        let decimal_after =
            after == Some('.') && chars.get(i + 1).is_some_and(char::is_ascii_digit);
        if decimal_before || decimal_after {
            continue;
        }
        let token: String = chars[start..i].iter().collect();
        match validate_fdi(token.parse().expect("two ascii digits")) {
            Ok(tooth) => {
                if !scan.teeth.contains(&tooth) {
                    scan.teeth.push(tooth);
                }
            }
            Err(_) => scan.rejected.push(token),
        }
    }
    scan
}

/// Tooth mentions in order of appearance, deduplicated.
pub fn tokenize_teeth(sentence: &str) -> Vec<FdiTooth> {
    scan_teeth(sentence).teeth
}

pub const DEFAULT_PRESENCE_PATTERNS: &[&str] = &["missing t(ee|oo)th", "absen(ce|t)", "anodontia"];

/// Recognizes sentences that only state which teeth are present or absent.
#[derive(Debug, Clone)]
pub struct PresenceFilter {
    patterns: Vec<Regex>,
}

impl PresenceFilter {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        if patterns.is_empty() {
            return Err(ReportError::EmptyPatternSet);
        }
        let patterns = patterns
            .iter()
            .map(|p| {
                RegexBuilder::new(p.as_ref())
                    .case_insensitive(true)
                    .build()
                    .map_err(|source| ReportError::InvalidPattern {
                        pattern: p.as_ref().to_string(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PresenceFilter { patterns })
    }

    pub fn patterns(&self) -> impl Iterator<Item = &str> {
        self.patterns.iter().map(Regex::as_str)
    }

    pub fn is_presence_sentence(&self, sentence: &str) -> bool {
        self.patterns.iter().any(|p| p.is_match(sentence))
    }
}

impl Default for PresenceFilter {
    fn default() -> Self {
        PresenceFilter::new(DEFAULT_PRESENCE_PATTERNS).expect("default patterns compile")
    }
}

/// Free-function form of [`PresenceFilter::is_presence_sentence`].
pub fn is_presence_sentence<S: AsRef<str>>(sentence: &str, patterns: &[S]) -> Result<bool> {
    Ok(PresenceFilter::new(patterns)?.is_presence_sentence(sentence))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub topic: u8,
    pub text: String,
    pub teeth: Vec<FdiTooth>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub image_id: String,
    pub lines: Vec<ReportLine>,
}

impl Report {
    /// Renders the report back into its `NN: text` form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&format!("{:02}: {}\n", line.topic, line.text));
        }
        out
    }

    pub fn line(&self, topic: u8) -> Option<&ReportLine> {
        self.lines.iter().find(|l| l.topic == topic)
    }
}

#[derive(Debug, Clone)]
pub struct ParsedReport {
    pub report: Report,
    pub warnings: Vec<ToothWarning>,
}

/// Parses a report, using `report_id` as the image id as well.
pub fn parse_report(raw_text: &str, report_id: &str, filter: &PresenceFilter) -> Result<Report> {
    parse_report_with_warnings(raw_text, report_id, filter).map(|p| p.report)
}

pub fn parse_report_with_warnings(
    raw_text: &str,
    report_id: &str,
    filter: &PresenceFilter,
) -> Result<ParsedReport> {
    let mut lines: Vec<ReportLine> = Vec::new();
    let mut warnings = Vec::new();
    for (idx, raw) in raw_text.lines().enumerate() {
        let line_no = idx + 1;
        let raw = raw.trim_start_matches('\u{feff}');
        if raw.trim().is_empty() {
            continue;
        }
        let bytes = raw.as_bytes();
        if bytes.len() < 3
            || !bytes[0].is_ascii_digit()
            || !bytes[1].is_ascii_digit()
            || bytes[2] != b':'
        {
            return Err(ReportError::MalformedLine {
                line: line_no,
                text: raw.to_string(),
            });
        }
        let topic = (bytes[0] - b'0') * 10 + (bytes[1] - b'0');
        if let Some(prev) = lines.last() {
            if lines.iter().any(|l| l.topic == topic) {
                return Err(ReportError::DuplicateTopicNumber {
                    line: line_no,
                    topic,
                });
            }
            if topic < prev.topic {
                return Err(ReportError::TopicOutOfOrder {
                    line: line_no,
                    topic,
                    previous: prev.topic,
                });
            }
        }
        let text = raw[3..].trim().to_string();
        let scan = scan_teeth(&text);
        warnings.extend(scan.rejected.into_iter().map(|token| ToothWarning {
            line: line_no,
            token,
        }));
        let excluded = filter.is_presence_sentence(&text);
        lines.push(ReportLine {
            topic,
            text,
            teeth: scan.teeth,
            excluded,
        });
    }
    for w in &warnings {
        log::warn!(
            "{report_id}:{}: two-digit token {} is not an FDI code",
            w.line,
            w.token
        );
    }
    Ok(ParsedReport {
        report: Report {
            report_id: report_id.to_string(),
            image_id: report_id.to_string(),
            lines,
        },
        warnings,
    })
}

/// Maps report ids to radiograph image ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest(pub BTreeMap<String, String>);

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ReportError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn image_id(&self, report_id: &str) -> Option<&str> {
        self.0.get(report_id).map(String::as_str)
    }
}

/// A set of parsed reports ordered by report id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub reports: Vec<Report>,
}

impl Corpus {
    pub fn new(mut reports: Vec<Report>) -> Result<Self> {
        reports.sort_by(|a, b| a.report_id.cmp(&b.report_id));
        if let Some(w) = reports
            .windows(2)
            .find(|w| w[0].report_id == w[1].report_id)
        {
            return Err(ReportError::DuplicateReport(w[0].report_id.clone()));
        }
        Ok(Corpus { reports })
    }

    pub fn get(&self, report_id: &str) -> Option<&Report> {
        self.reports
            .binary_search_by(|r| r.report_id.as_str().cmp(report_id))
            .ok()
            .map(|i| &self.reports[i])
    }

    /// Loads every `.txt` file in `dir`; the file stem is the report id.
    pub fn load_dir(
        dir: &Path,
        manifest: &CorpusManifest,
        filter: &PresenceFilter,
    ) -> Result<Self> {
        let io_err = |source| ReportError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err)? {
            let path = entry.map_err(io_err)?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                paths.push(path);
            }
        }
        let reports = paths
            .par_iter()
            .map(|path| {
                let report_id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let raw = fs::read_to_string(path).map_err(|source| ReportError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let mut report = parse_report(&raw, &report_id, filter)?;
                report.image_id = manifest
                    .image_id(&report_id)
                    .ok_or_else(|| ReportError::UnmappedReport(report_id.clone()))?
                    .to_string();
                Ok(report)
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(reports)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&serde_json::to_string(r).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let reports = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Report>, _>>()
            .map_err(|source| ReportError::Json {
                path: "<corpus jsonl>".into(),
                source,
            })?;
        Corpus::new(reports)
    }
}
