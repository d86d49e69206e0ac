//! Noun-phrase extraction from report lines.
//!
//! Two extractors share one output type:
//!
//! * [`RemoteExtractor`] sends report text with a fixed instruction prompt to an
//!   OpenAI-compatible chat-completion endpoint and parses the bulleted lists
//!   it answers with.
//! * [`RuleExtractor`] is an offline, deterministic chunker.
//!
//! [`PhrasePipeline`] puts either (or both, remote first) behind an
//! append-only JSON Lines cache so that repeated runs never touch the network.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::report::{tokenize_teeth, validate_fdi, Corpus, Report, ReportLine};

/// The instruction sent as the system message to the chat endpoint.
pub const DEFAULT_PROMPT: &str = include_str!("../assets/noun_phrase_prompt.txt");

#[derive(Debug, Error)]
pub enum PhraseError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("endpoint rate limited the request")]
    RateLimited,
    #[error("response could not be parsed: {0}")]
    ResponseUnparseable(String),
    #[error("cache entry {key} is corrupt: {reason}")]
    CacheCorrupt { key: String, reason: String },
    #[error("cache {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("strategy {0:?} needs a remote extractor")]
    NoRemote(Strategy),
}

pub type Result<T, E = PhraseError> = std::result::Result<T, E>;

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
pub fn normalize(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    pub surface: String,
    pub normalized: String,
    pub is_tooth_mention: bool,
}

impl NounPhrase {
    /// `None` when nothing survives normalization.
    pub fn new(surface: &str) -> Option<Self> {
        let surface = surface.trim();
        let normalized = normalize(surface);
        if normalized.is_empty() {
            return None;
        }
        Some(NounPhrase {
            surface: surface.to_string(),
            is_tooth_mention: !tokenize_teeth(surface).is_empty(),
            normalized,
        })
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "to", "for", "from", "by", "into", "and",
    "or",
];
const TOOTH_HEADS: &[&str] = &["tooth", "teeth"];

/// Deterministic offline chunker.
///
/// Splits at `:` `.` `;` `,` and at the conjunctions "and"/"or", separates the
/// tooth-mention span of a chunk from the words around it, and trims
/// articles and prepositions from chunk edges. Multi-word terms listed as
/// protected (e.g. "included and impacted") are never split.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    protected: Vec<Vec<String>>,
}

impl RuleExtractor {
    pub const VERSION: &'static str = "rules/v1";

    pub fn new<S: AsRef<str>>(protected: &[S]) -> Self {
        let mut protected: Vec<Vec<String>> = protected
            .iter()
            .map(|p| {
                normalize(p.as_ref())
                    .split(' ')
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .filter(|w| w.len() > 1)
            .collect();
        protected.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        protected.dedup();
        RuleExtractor { protected }
    }

    /// Identity string for cache keys; changes whenever the protected list does.
    pub fn identity(&self) -> String {
        let joined: Vec<String> = self.protected.iter().map(|w| w.join(" ")).collect();
        format!(
            "{}#{}",
            Self::VERSION,
            &sha256_hex(joined.join("\n").as_bytes())[..12]
        )
    }

    pub fn extract(&self, sentence: &str) -> Vec<NounPhrase> {
        let mut out = Vec::new();
        for segment in split_segments(sentence) {
            let words: Vec<&str> = segment.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            let lower: Vec<String> = words.iter().map(|w| normalize(w)).collect();
            let covered = self.protected_mask(&lower);
            let mut start = 0;
            for i in 0..=words.len() {
                let boundary =
                    i == words.len() || (!covered[i] && (lower[i] == "and" || lower[i] == "or"));
                if boundary {
                    if start < i {
                        emit_chunk(&words[start..i], &lower[start..i], &mut out);
                    }
                    start = i + 1;
                }
            }
        }
        out
    }

    fn protected_mask(&self, lower: &[String]) -> Vec<bool> {
        let mut covered = vec![false; lower.len()];
        let mut i = 0;
        while i < lower.len() {
            let hit = self
                .protected
                .iter()
                .find(|p| i + p.len() <= lower.len() && lower[i..i + p.len()] == p[..]);
            match hit {
                Some(p) => {
                    covered[i..i + p.len()].iter_mut().for_each(|c| *c = true);
                    i += p.len();
                }
                None => i += 1,
            }
        }
        covered
    }
}

fn split_segments(sentence: &str) -> Vec<String> {
    let chars: Vec<char> = sentence.chars().collect();
    let mut segments = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let decimal = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(char::is_ascii_digit);
        if matches!(c, ':' | ';' | ',' | '.' | '!' | '?') && !decimal {
            segments.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    segments.push(current);
    segments
}

fn is_tooth_word(w: &str) -> bool {
    w.len() == 2
        && w.bytes().all(|b| b.is_ascii_digit())
        && validate_fdi(w.parse().unwrap_or(0)).is_ok()
}

fn emit_chunk(words: &[&str], lower: &[String], out: &mut Vec<NounPhrase>) {
    let teeth: Vec<usize> = (0..lower.len())
        .filter(|&i| is_tooth_word(&lower[i]))
        .collect();
    let pieces: Vec<(usize, usize)> = match (teeth.first(), teeth.last()) {
        (Some(&first), Some(&last)) => {
            let head = if first > 0 && TOOTH_HEADS.contains(&lower[first - 1].as_str()) {
                first - 1
            } else {
                first
            };
            vec![(0, head), (head, last + 1), (last + 1, words.len())]
        }
        _ => vec![(0, words.len())],
    };
    for (mut a, mut b) in pieces {
        while a < b && STOP_WORDS.contains(&lower[a].as_str()) {
            a += 1;
        }
        while a < b && STOP_WORDS.contains(&lower[b - 1].as_str()) {
            b -= 1;
        }
        if a < b {
            if let Some(p) = NounPhrase::new(&words[a..b].join(" ")) {
                out.push(p);
            }
        }
    }
}

/// Parses a chat response into per-topic phrase lists.
///
/// Topic headers are lines starting with a two-digit number and a colon
/// (markdown emphasis allowed); items are lines starting with `-`, `*`, or a
/// number followed by `.` or `)`. When `topics` has a single entry, items
/// without a header belong to it.
pub fn parse_topic_lists(response: &str, topics: &[u8]) -> Result<BTreeMap<u8, Vec<String>>> {
    let mut lists: BTreeMap<u8, Vec<String>> = BTreeMap::new();
    let mut current: Option<u8> = if topics.len() == 1 {
        Some(topics[0])
    } else {
        None
    };
    let mut items = 0usize;
    for raw in response.lines() {
        let line = raw
            .trim()
            .trim_start_matches(['#', ' '])
            .trim_matches('*')
            .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(topic) = topic_header(line) {
            current = Some(topic);
            lists.entry(topic).or_default();
            continue;
        }
        let Some(item) = bullet_item(raw.trim()) else {
            continue;
        };
        let Some(topic) = current else {
            return Err(PhraseError::ResponseUnparseable(format!(
                "list item {item:?} appears before any topic header"
            )));
        };
        lists.entry(topic).or_default().push(item);
        items += 1;
    }
    if items == 0 {
        return Err(PhraseError::ResponseUnparseable(
            "no bulleted or numbered list found".into(),
        ));
    }
    for t in topics {
        if !lists.contains_key(t) {
            return Err(PhraseError::ResponseUnparseable(format!(
                "topic {t:02} missing from response"
            )));
        }
    }
    lists.retain(|t, _| topics.contains(t));
    Ok(lists)
}

fn topic_header(line: &str) -> Option<u8> {
    let b = line.as_bytes();
    if b.len() >= 3 && b[0].is_ascii_digit() && b[1].is_ascii_digit() && b[2] == b':' {
        Some((b[0] - b'0') * 10 + (b[1] - b'0'))
    } else {
        None
    }
}

fn bullet_item(line: &str) -> Option<String> {
    let rest = if let Some(r) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        r
    } else {
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 || digits > 3 {
            return None;
        }
        let r = &line[digits..];
        r.strip_prefix(". ").or_else(|| r.strip_prefix(") "))?
    };
    let item = rest.trim().trim_matches('*').trim();
    (!item.is_empty()).then(|| item.to_string())
}

/// Something that answers a (system, user) message pair.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_concurrent: usize,
    /// One request per sentence instead of one per report.
    pub per_sentence: bool,
    pub temperature: Option<f64>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_concurrent: 4,
            per_sentence: false,
            temperature: Some(0.0),
        }
    }
}

/// Blocking HTTP client for `POST {base_url}/chat/completions`.
pub struct HttpChatTransport {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpChatTransport {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatTransport { config, agent }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        let mut request = self.agent.post(&url);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| PhraseError::EndpointUnavailable(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 {
            return Err(PhraseError::RateLimited);
        }
        if !(200..300).contains(&status) {
            return Err(PhraseError::EndpointUnavailable(format!(
                "HTTP {status} from {url}"
            )));
        }
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| PhraseError::ResponseUnparseable(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                PhraseError::ResponseUnparseable("response has no message content".into())
            })
    }

    fn identity(&self) -> String {
        format!("remote:{}", self.config.model)
    }
}

pub struct RemoteExtractor {
    transport: Box<dyn ChatTransport>,
    prompt: String,
    per_sentence: bool,
}

impl RemoteExtractor {
    pub fn new(transport: Box<dyn ChatTransport>, prompt: impl Into<String>) -> Self {
        RemoteExtractor {
            transport,
            prompt: prompt.into(),
            per_sentence: false,
        }
    }

    pub fn http(config: EndpointConfig, prompt: impl Into<String>) -> Self {
        let per_sentence = config.per_sentence;
        RemoteExtractor::new(Box::new(HttpChatTransport::new(config)), prompt)
            .per_sentence(per_sentence)
    }

    pub fn per_sentence(mut self, yes: bool) -> Self {
        self.per_sentence = yes;
        self
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn identity(&self) -> String {
        self.transport.identity()
    }

    pub fn extract_line(&self, line: &ReportLine) -> Result<Vec<NounPhrase>> {
        if line.text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let user = format!("{:02}: {}", line.topic, line.text);
        let response = self.transport.complete(&self.prompt, &user)?;
        let lists = parse_topic_lists(&response, &[line.topic])?;
        Ok(to_phrases(lists.into_values().next().unwrap_or_default()))
    }

    /// Extracts the given lines, one request for all of them unless
    /// configured per sentence.
    pub fn extract_lines(&self, lines: &[&ReportLine]) -> Result<BTreeMap<u8, Vec<NounPhrase>>> {
        let lines: Vec<&ReportLine> = lines
            .iter()
            .copied()
            .filter(|l| !l.text.trim().is_empty())
            .collect();
        if lines.is_empty() {
            return Ok(BTreeMap::new());
        }
        if self.per_sentence || lines.len() == 1 {
            return lines
                .iter()
                .map(|l| Ok((l.topic, self.extract_line(l)?)))
                .collect();
        }
        let user: String = lines
            .iter()
            .map(|l| format!("{:02}: {}\n", l.topic, l.text))
            .collect();
        let topics: Vec<u8> = lines.iter().map(|l| l.topic).collect();
        let response = self.transport.complete(&self.prompt, &user)?;
        let lists = parse_topic_lists(&response, &topics)?;
        Ok(lists
            .into_iter()
            .map(|(t, items)| (t, to_phrases(items)))
            .collect())
    }
}

fn to_phrases(items: Vec<String>) -> Vec<NounPhrase> {
    items.iter().filter_map(|s| NounPhrase::new(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Remote,
    Rules,
    RemoteThenRules,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "remote" => Ok(Strategy::Remote),
            "rules" => Ok(Strategy::Rules),
            "remote-then-rules" => Ok(Strategy::RemoteThenRules),
            other => Err(format!("unknown extraction strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    /// Which extractor actually produced the phrases.
    pub extractor: String,
    pub phrases: Vec<NounPhrase>,
    pub timestamp: u64,
    pub checksum: String,
}

impl CacheEntry {
    fn new(key: String, extractor: String, phrases: Vec<NounPhrase>) -> Self {
        let checksum = phrases_checksum(&phrases);
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        CacheEntry {
            key,
            extractor,
            phrases,
            timestamp,
            checksum,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn phrases_checksum(phrases: &[NounPhrase]) -> String {
    sha256_hex(
        serde_json::to_string(phrases)
            .expect("phrases serialize")
            .as_bytes(),
    )
}

/// Content hash over prompt, sentence and requested extractor.
pub fn cache_key(prompt: &str, sentence: &str, extractor: &str) -> String {
    let mut h = Sha256::new();
    for part in [prompt, sentence, extractor] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Append-only JSON Lines cache; the last entry for a key wins.
pub struct PhraseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl PhraseCache {
    pub fn in_memory() -> Self {
        PhraseCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let io = |source| PhraseError::CacheIo {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(io)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(line).map_err(|e| PhraseError::CacheCorrupt {
                        key: serde_json::from_str::<serde_json::Value>(line)
                            .ok()
                            .and_then(|v| v.get("key").and_then(|k| k.as_str()).map(str::to_string))
                            .unwrap_or_else(|| format!("<line {}>", i + 1)),
                        reason: e.to_string(),
                    })?;
                if phrases_checksum(&entry.phrases) != entry.checksum {
                    return Err(PhraseError::CacheCorrupt {
                        key: entry.key,
                        reason: "checksum mismatch".into(),
                    });
                }
                entries.insert(entry.key.clone(), entry);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(PhraseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let mut writer = self.writer.lock().expect("cache writer");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|source| PhraseError::CacheIo {
                    path: self
                        .path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    source,
                })?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(entry.key.clone(), entry);
        Ok(())
    }
}

/// Phrases for one line plus the extractor that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePhrases {
    pub topic: u8,
    pub extractor: String,
    pub phrases: Vec<NounPhrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPhrases {
    pub report_id: String,
    pub lines: Vec<LinePhrases>,
}

impl ReportPhrases {
    pub fn line(&self, topic: u8) -> Option<&LinePhrases> {
        self.lines.iter().find(|l| l.topic == topic)
    }
}

/// Extracted phrases for a whole corpus, keyed by report id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub reports: BTreeMap<String, ReportPhrases>,
}

impl PhraseSet {
    pub fn get(&self, report_id: &str) -> Option<&ReportPhrases> {
        self.reports.get(report_id)
    }

    /// Distinct extractor identities that contributed.
    pub fn extractors(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .reports
            .values()
            .flat_map(|r| r.lines.iter().map(|l| l.extractor.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_jsonl(&self) -> String {
        self.reports
            .values()
            .map(|r| serde_json::to_string(r).expect("phrases serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut set = PhraseSet::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: ReportPhrases = serde_json::from_str(line)?;
            set.reports.insert(r.report_id.clone(), r);
        }
        Ok(set)
    }
}

/// Strategy dispatch in front of the cache.
pub struct PhrasePipeline<'a> {
    pub strategy: Strategy,
    pub rules: &'a RuleExtractor,
    pub remote: Option<&'a RemoteExtractor>,
    pub cache: &'a PhraseCache,
    pub max_retries: u32,
    pub max_concurrent: usize,
}

impl<'a> PhrasePipeline<'a> {
    pub fn new(
        strategy: Strategy,
        rules: &'a RuleExtractor,
        remote: Option<&'a RemoteExtractor>,
        cache: &'a PhraseCache,
    ) -> Self {
        PhrasePipeline {
            strategy,
            rules,
            remote,
            cache,
            max_retries: 2,
            max_concurrent: 4,
        }
    }

    fn requested_identity(&self) -> Result<String> {
        let rules = self.rules.identity();
        let remote = || {
            self.remote
                .map(|r| r.identity())
                .ok_or(PhraseError::NoRemote(self.strategy))
        };
        Ok(match self.strategy {
            Strategy::Rules => rules,
            Strategy::Remote => remote()?,
            Strategy::RemoteThenRules => format!("{}|{}", remote()?, rules),
        })
    }

    fn prompt(&self) -> &str {
        match (self.strategy, self.remote) {
            (Strategy::Rules, _) | (_, None) => "",
            (_, Some(r)) => r.prompt(),
        }
    }

    fn key(&self, identity: &str, line: &ReportLine) -> String {
        cache_key(self.prompt(), &line.text, identity)
    }

    fn remote_with_retry(
        &self,
        remote: &RemoteExtractor,
        lines: &[&ReportLine],
    ) -> Result<BTreeMap<u8, Vec<NounPhrase>>> {
        let mut attempt = 0;
        loop {
            match remote.extract_lines(lines) {
                Err(PhraseError::RateLimited) if attempt < self.max_retries => {
                    std::thread::sleep(Duration::from_millis(500 << attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Cached extraction for a single line.
    pub fn extract_with_cache(&self, line: &ReportLine) -> Result<LinePhrases> {
        let report = Report {
            report_id: String::new(),
            image_id: String::new(),
            lines: vec![ReportLine {
                excluded: false,
                ..line.clone()
            }],
        };
        let mut out = self.extract_report(&report)?;
        Ok(out.lines.pop().unwrap_or(LinePhrases {
            topic: line.topic,
            extractor: self.requested_identity()?,
            phrases: Vec::new(),
        }))
    }

    /// Extracts every non-excluded line of a report. Lines already cached
    /// are not sent anywhere; the rest go out in one remote request.
    pub fn extract_report(&self, report: &Report) -> Result<ReportPhrases> {
        let identity = self.requested_identity()?;
        let lines: Vec<&ReportLine> = report.lines.iter().filter(|l| !l.excluded).collect();
        let mut done: BTreeMap<u8, LinePhrases> = BTreeMap::new();
        let mut missing = Vec::new();
        for line in &lines {
            match self.cache.get(&self.key(&identity, line)) {
                Some(entry) => {
                    done.insert(
                        line.topic,
                        LinePhrases {
                            topic: line.topic,
                            extractor: entry.extractor,
                            phrases: entry.phrases,
                        },
                    );
                }
                None => missing.push(*line),
            }
        }
        if !missing.is_empty() {
            let (producer, fresh) = self.run_strategy(&missing)?;
            for line in &missing {
                let phrases = fresh.get(&line.topic).cloned().unwrap_or_default();
                self.cache.insert(CacheEntry::new(
                    self.key(&identity, line),
                    producer.clone(),
                    phrases.clone(),
                ))?;
                done.insert(
                    line.topic,
                    LinePhrases {
                        topic: line.topic,
                        extractor: producer.clone(),
                        phrases,
                    },
                );
            }
        }
        Ok(ReportPhrases {
            report_id: report.report_id.clone(),
            lines: done.into_values().collect(),
        })
    }

    fn run_strategy(
        &self,
        lines: &[&ReportLine],
    ) -> Result<(String, BTreeMap<u8, Vec<NounPhrase>>)> {
        let rules = || {
            let out = lines
                .iter()
                .map(|l| (l.topic, self.rules.extract(&l.text)))
                .collect();
            (self.rules.identity(), out)
        };
        match self.strategy {
            Strategy::Rules => Ok(rules()),
            Strategy::Remote => {
                let remote = self.remote.ok_or(PhraseError::NoRemote(self.strategy))?;
                Ok((remote.identity(), self.remote_with_retry(remote, lines)?))
            }
            Strategy::RemoteThenRules => {
                let remote = self.remote.ok_or(PhraseError::NoRemote(self.strategy))?;
                match self.remote_with_retry(remote, lines) {
                    Ok(found) => Ok((remote.identity(), found)),
                    Err(e) => {
                        log::warn!("remote extraction failed, using rules: {e}");
                        Ok(rules())
                    }
                }
            }
        }
    }

    /// Extracts a whole corpus. Remote strategies run at most
    /// `max_concurrent` requests at a time.
    pub fn extract_corpus(&self, corpus: &Corpus) -> Result<PhraseSet> {
        let run = || {
            corpus
                .reports
                .par_iter()
                .map(|r| self.extract_report(r))
                .collect::<Result<Vec<_>>>()
        };
        let reports = if self.strategy == Strategy::Rules {
            run()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.max_concurrent.max(1))
                .build()
                .map_err(|e| PhraseError::EndpointUnavailable(e.to_string()))?
                .install(run)?
        };
        Ok(PhraseSet {
            reports: reports
                .into_iter()
                .map(|r| (r.report_id.clone(), r))
                .collect(),
        })
    }
}
