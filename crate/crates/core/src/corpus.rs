//! Shared document model, JSONL ingestion and stage manifests.
//!
//! Every stage reads and writes [`SourceDocument`]s as JSON lines and records a
//! [`CorpusManifest`] next to its outputs. Manifests are serialized as
//! canonical JSON (sorted keys, no insignificant whitespace) so identical runs
//! produce byte-identical files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Where a document was fetched from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Github,
    Web,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Github => f.write_str("github"),
            Origin::Web => f.write_str("web"),
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "github" => Ok(Origin::Github),
            "web" => Ok(Origin::Web),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

/// Token-accounting category of the final training mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusCategory {
    Code,
    Math,
    NaturalLanguage,
}

impl CorpusCategory {
    pub const ALL: [CorpusCategory; 3] = [
        CorpusCategory::Code,
        CorpusCategory::Math,
        CorpusCategory::NaturalLanguage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusCategory::Code => "code",
            CorpusCategory::Math => "math",
            CorpusCategory::NaturalLanguage => "natural_language",
        }
    }
}

impl fmt::Display for CorpusCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "code" => Ok(CorpusCategory::Code),
            "math" => Ok(CorpusCategory::Math),
            "nl" | "natural_language" => Ok(CorpusCategory::NaturalLanguage),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

/// Pipeline stage that produced a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingested,
    Filtered,
    Deduped,
    Recalled,
    Mixed,
    Packed,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingested,
        Stage::Filtered,
        Stage::Deduped,
        Stage::Recalled,
        Stage::Mixed,
        Stage::Packed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Filtered => "filtered",
            Stage::Deduped => "deduped",
            Stage::Recalled => "recalled",
            Stage::Mixed => "mixed",
            Stage::Packed => "packed",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ingested file or web page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub content: String,
    #[serde(default = "unknown_language")]
    pub language: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

fn unknown_language() -> String {
    "unknown".to_string()
}

impl SourceDocument {
    /// Minimal constructor used heavily by tests and fixtures.
    pub fn new(id: impl Into<String>, content: impl Into<String>, origin: Origin) -> Self {
        SourceDocument {
            id: id.into(),
            content: content.into(),
            language: unknown_language(),
            origin,
            url: None,
            domain: None,
            created_at: None,
        }
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = language.into();
        self
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = Some(url.into());
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }
}

/// Replace `\r\n` and lone `\r` with `\n`.
pub fn normalize_line_endings(text: &str) -> String {
    if !text.contains('\r') {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\r' {
            if chars.peek() == Some(&'\n') {
                chars.next();
            }
            out.push('\n');
        } else {
            out.push(c);
        }
    }
    out
}

/// Host of `url` with a leading `www.` stripped, lowercased.
pub fn domain_from_url(raw: &str) -> Option<String> {
    let parsed = url::Url::parse(raw).ok()?;
    let host = parsed.host_str()?.to_ascii_lowercase();
    Some(host.strip_prefix("www.").map(str::to_string).unwrap_or(host))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestErrorReason {
    Parse,
    InvalidUtf8,
    MissingDomain,
    DuplicateId,
    Io,
}

impl fmt::Display for IngestErrorReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IngestErrorReason::Parse => "parse",
            IngestErrorReason::InvalidUtf8 => "invalid-utf8",
            IngestErrorReason::MissingDomain => "missing-domain",
            IngestErrorReason::DuplicateId => "duplicate-id",
            IngestErrorReason::Io => "io",
        };
        f.write_str(s)
    }
}

/// A per-line ingestion failure. The stream continues after one of these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("line {line}: {reason}: {message}")]
pub struct IngestError {
    /// 1-based line number in the input file.
    pub line: usize,
    pub reason: IngestErrorReason,
    pub message: String,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    content: String,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    created_at: Option<String>,
}

/// True when a JSON text contains a `\uXXXX` escape naming a lone UTF-16
/// surrogate, which has no UTF-8 encoding.
fn has_unpaired_surrogate_escape(text: &str) -> bool {
    let bytes = text.as_bytes();
    let hex_at = |i: usize| -> Option<u32> {
        let digits = bytes.get(i..i + 4)?;
        u32::from_str_radix(std::str::from_utf8(digits).ok()?, 16).ok()
    };
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            i += 1;
            continue;
        }
        if bytes.get(i + 1) != Some(&b'u') {
            i += 2;
            continue;
        }
        match hex_at(i + 2) {
            Some(0xD800..=0xDBFF) => {
                let paired = bytes.get(i + 6..i + 8) == Some(b"\\u".as_slice())
                    && matches!(hex_at(i + 8), Some(0xDC00..=0xDFFF));
                if !paired {
                    return true;
                }
                i += 12;
            }
            Some(0xDC00..=0xDFFF) => return true,
            _ => i += 6,
        }
    }
    false
}

/// Streaming JSONL reader yielding one result per non-blank line.
pub struct JsonlIngest<R> {
    reader: R,
    origin: Origin,
    line_no: usize,
    seen_ids: HashSet<String>,
    buf: Vec<u8>,
}

impl<R: BufRead> JsonlIngest<R> {
    pub fn new(reader: R, origin: Origin) -> Self {
        JsonlIngest {
            reader,
            origin,
            line_no: 0,
            seen_ids: HashSet::new(),
            buf: Vec::new(),
        }
    }

    fn parse_line(&mut self, bytes: &[u8]) -> Result<SourceDocument, IngestError> {
        let line = self.line_no;
        let err = |reason, message: String| IngestError {
            line,
            reason,
            message,
        };
        let text = std::str::from_utf8(bytes)
            .map_err(|e| err(IngestErrorReason::InvalidUtf8, e.to_string()))?;
        let raw: RawRecord = serde_json::from_str(text).map_err(|e| {
            if has_unpaired_surrogate_escape(text) {
                err(IngestErrorReason::InvalidUtf8, format!("unpaired surrogate escape: {e}"))
            } else {
                err(IngestErrorReason::Parse, e.to_string())
            }
        })?;

        let domain = match (raw.domain, &raw.url) {
            (Some(d), _) => Some(d),
            (None, Some(u)) => domain_from_url(u),
            (None, None) => None,
        };
        if self.origin == Origin::Web && domain.is_none() {
            return Err(err(
                IngestErrorReason::MissingDomain,
                format!("web document `{}` has neither domain nor parseable url", raw.id),
            ));
        }
        if !self.seen_ids.insert(raw.id.clone()) {
            return Err(err(
                IngestErrorReason::DuplicateId,
                format!("id `{}` already seen", raw.id),
            ));
        }

        Ok(SourceDocument {
            id: raw.id,
            content: normalize_line_endings(&raw.content),
            language: raw.language.unwrap_or_else(unknown_language),
            origin: self.origin,
            url: raw.url,
            domain,
            created_at: raw.created_at,
        })
    }
}

impl<R: BufRead> Iterator for JsonlIngest<R> {
    type Item = Result<SourceDocument, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    return Some(Err(IngestError {
                        line: self.line_no + 1,
                        reason: IngestErrorReason::Io,
                        message: e.to_string(),
                    }))
                }
            }
            self.line_no += 1;
            let mut line = std::mem::take(&mut self.buf);
            while matches!(line.last(), Some(b'\n' | b'\r')) {
                line.pop();
            }
            if line.iter().all(u8::is_ascii_whitespace) {
                self.buf = line;
                continue;
            }
            let result = self.parse_line(&line);
            self.buf = line;
            return Some(result);
        }
    }
}

/// Open `path` and stream its documents in file order.
pub fn ingest_jsonl(path: &Path, origin: Origin) -> io::Result<JsonlIngest<BufReader<File>>> {
    let file = File::open(path)?;
    Ok(JsonlIngest::new(BufReader::new(file), origin))
}

/// Write documents as JSON lines.
pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    docs: impl IntoIterator<Item = &'a SourceDocument>,
) -> io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Read documents previously written by [`write_jsonl`] (origin is taken from each line).
pub fn read_documents(path: &Path) -> io::Result<Vec<SourceDocument>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SourceDocument = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), idx + 1),
            )
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Serialize any value as canonical JSON: object keys sorted, compact separators.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json::Map is a BTreeMap unless `preserve_order` is enabled, so a
    // round-trip through Value sorts every object's keys.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = canonical_json(config).expect("stage configs serialize to JSON");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Running statistics a stage accumulates before emitting its manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub input_doc_count: u64,
    pub category_counts: BTreeMap<CorpusCategory, u64>,
    pub seed_sizes: Vec<u64>,
}

impl CorpusStats {
    pub fn add_tokens(&mut self, category: CorpusCategory, tokens: u64) {
        *self.category_counts.entry(category).or_insert(0) += tokens;
    }

    pub fn token_count(&self) -> u64 {
        self.category_counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub stage: Stage,
    pub doc_count: u64,
    /// Documents consumed by the stage; `doc_count` is what it produced.
    pub input_doc_count: u64,
    pub token_count: u64,
    pub category_counts: BTreeMap<CorpusCategory, u64>,
    pub config_digest: String,
    pub rng_seed: u64,
    /// Seed-set size after each recall iteration (recall stage only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_sizes: Vec<u64>,
}

impl CorpusManifest {
    pub fn to_canonical_json(&self) -> String {
        canonical_json(self).expect("manifest serializes")
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        let mut json = self.to_canonical_json();
        json.push('\n');
        std::fs::write(path, json)
    }

    pub fn read_from(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Build the manifest for `stage`; `token_count` is always the sum of the category counts.
pub fn emit_manifest<C: Serialize>(
    stats: &CorpusStats,
    stage: Stage,
    config: &C,
    seed: u64,
) -> CorpusManifest {
    CorpusManifest {
        stage,
        doc_count: stats.doc_count,
        input_doc_count: stats.input_doc_count,
        token_count: stats.token_count(),
        category_counts: stats.category_counts.clone(),
        config_digest: config_digest(config),
        rng_seed: seed,
        seed_sizes: stats.seed_sizes.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ingest_str(s: &str, origin: Origin) -> Vec<Result<SourceDocument, IngestError>> {
        JsonlIngest::new(Cursor::new(s.as_bytes().to_vec()), origin).collect()
    }

    #[test]
    fn crlf_is_normalized() {
        let out = ingest_str(r#"{"id":"a","content":"x\r\ny"}"#, Origin::Github);
        assert_eq!(out.len(), 1);
        let doc = out[0].as_ref().unwrap();
        assert_eq!(doc.content, "x\ny");
        assert_eq!(doc.origin, Origin::Github);
        assert_eq!(doc.language, "unknown");
        assert_eq!(normalize_line_endings("a\rb\r\n"), "a\nb\n");
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(ingest_str("", Origin::Github).is_empty());
        assert!(ingest_str("\n\n", Origin::Github).is_empty());
    }

    #[test]
    fn truncated_line_is_reported_and_stream_continues() {
        let input = "{\"id\":\"a\",\"content\":\"1\"}\n{\"id\":\"b\",\"cont\n{\"id\":\"c\",\"content\":\"3\"}\n";
        let out = ingest_str(input, Origin::Github);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_ref().unwrap().id, "a");
        let err = out[1].as_ref().unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.reason, IngestErrorReason::Parse);
        assert_eq!(out[2].as_ref().unwrap().id, "c");
    }

    #[test]
    fn invalid_utf8_is_rejected() {
        let mut bytes = b"{\"id\":\"a\",\"content\":\"".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe]);
        bytes.extend_from_slice(b"\"}\n{\"id\":\"b\",\"content\":\"ok\"}\n");
        let out: Vec<_> = JsonlIngest::new(Cursor::new(bytes), Origin::Github).collect();
        assert_eq!(out[0].as_ref().unwrap_err().reason, IngestErrorReason::InvalidUtf8);
        assert_eq!(out[1].as_ref().unwrap().content, "ok");

        let lone = ingest_str(r#"{"id":"s","content":"\ud800"}"#, Origin::Github);
        assert_eq!(lone[0].as_ref().unwrap_err().reason, IngestErrorReason::InvalidUtf8);
    }

    #[test]
    fn web_documents_need_a_domain() {
        let out = ingest_str(
            "{\"id\":\"a\",\"content\":\"x\"}\n{\"id\":\"b\",\"content\":\"x\",\"url\":\"https://www.Example.org/a\"}\n",
            Origin::Web,
        );
        assert_eq!(out[0].as_ref().unwrap_err().reason, IngestErrorReason::MissingDomain);
        assert_eq!(out[1].as_ref().unwrap().domain.as_deref(), Some("example.org"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let out = ingest_str(
            "{\"id\":\"a\",\"content\":\"x\"}\n{\"id\":\"a\",\"content\":\"y\"}\n",
            Origin::Github,
        );
        assert!(out[0].is_ok());
        assert_eq!(out[1].as_ref().unwrap_err().reason, IngestErrorReason::DuplicateId);
    }

    #[test]
    fn empty_manifest() {
        let m = emit_manifest(&CorpusStats::default(), Stage::Ingested, &(), 7);
        assert_eq!(m.doc_count, 0);
        assert_eq!(m.token_count, 0);
        assert_eq!(m.stage, Stage::Ingested);
    }

    #[test]
    fn manifest_token_count_is_category_sum() {
        let mut stats = CorpusStats::default();
        stats.add_tokens(CorpusCategory::Code, 60);
        stats.add_tokens(CorpusCategory::Math, 10);
        stats.add_tokens(CorpusCategory::NaturalLanguage, 30);
        let m = emit_manifest(&stats, Stage::Mixed, &("cfg", 1), 0);
        assert_eq!(m.token_count, 100);
    }

    #[test]
    fn manifest_json_is_canonical_and_deterministic() {
        let mut stats = CorpusStats::default();
        stats.doc_count = 3;
        stats.add_tokens(CorpusCategory::Math, 5);
        let cfg = serde_json::json!({"b": 1, "a": [1, 2]});
        let a = emit_manifest(&stats, Stage::Filtered, &cfg, 9).to_canonical_json();
        let b = emit_manifest(&stats, Stage::Filtered, &cfg, 9).to_canonical_json();
        assert_eq!(a, b);
        let keys: Vec<_> = serde_json::from_str::<serde_json::Value>(&a)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(a.find("\"category_counts\"").unwrap() < a.find("\"config_digest\"").unwrap());
        // digest is sensitive to config content
        assert_ne!(config_digest(&cfg), config_digest(&serde_json::json!({"b": 2})));
    }
}
