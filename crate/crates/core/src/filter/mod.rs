//! File-level quality rules for source code.
//!
//! Rules run in a fixed order and the first failing rule is recorded:
//!
//! 1. average line length `> avg_line_limit` rejects
//! 2. maximum line length `> max_line_limit` rejects
//! 3. alphabetic fraction `< min_alpha_fraction` rejects
//! 4. `<?xml version=` starting inside the first `xml_probe_window` characters
//!    rejects, unless the language is exempt (XSLT)
//! 5. HTML only: kept when visible ratio `>= html_min_visible_fraction` and
//!    visible characters `>= html_min_visible_chars`
//! 6. JSON/YAML only: kept when `structured_min_chars <= chars <= structured_max_chars`
//!
//! All lengths are counted in Unicode scalar values.

pub mod html;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceDocument;
pub use html::{html_visible_stats, visible_text, HtmlVisibleStats};

const XML_HEADER: &str = "<?xml version=";

#[derive(Debug, Error, PartialEq)]
pub enum FilterConfigError {
    #[error("`{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("`{0}` must lie in (0, 1)")]
    FractionOutOfRange(&'static str),
    #[error("structured_min_chars exceeds structured_max_chars")]
    InvertedStructuredRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub avg_line_limit: u64,
    pub max_line_limit: u64,
    pub min_alpha_fraction: f64,
    pub xml_probe_window: u64,
    pub html_min_visible_fraction: f64,
    pub html_min_visible_chars: u64,
    pub structured_min_chars: u64,
    pub structured_max_chars: u64,
    pub xml_exempt_languages: BTreeSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            avg_line_limit: 100,
            max_line_limit: 1000,
            min_alpha_fraction: 0.25,
            xml_probe_window: 100,
            html_min_visible_fraction: 0.20,
            html_min_visible_chars: 100,
            structured_min_chars: 50,
            structured_max_chars: 5000,
            xml_exempt_languages: ["XSLT".to_string()].into_iter().collect(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterConfigError> {
        let positive = [
            ("avg_line_limit", self.avg_line_limit),
            ("max_line_limit", self.max_line_limit),
            ("xml_probe_window", self.xml_probe_window),
            ("html_min_visible_chars", self.html_min_visible_chars),
            ("structured_min_chars", self.structured_min_chars),
            ("structured_max_chars", self.structured_max_chars),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FilterConfigError::NonPositive(name));
            }
        }
        for (name, v) in [
            ("min_alpha_fraction", self.min_alpha_fraction),
            ("html_min_visible_fraction", self.html_min_visible_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(FilterConfigError::FractionOutOfRange(name));
            }
        }
        if self.structured_min_chars > self.structured_max_chars {
            return Err(FilterConfigError::InvertedStructuredRange);
        }
        Ok(())
    }

    fn is_xml_exempt(&self, language: &str) -> bool {
        self.xml_exempt_languages
            .iter()
            .any(|l| l.eq_ignore_ascii_case(language))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    None,
    AvgLine,
    MaxLine,
    AlphaFraction,
    XmlHeader,
    HtmlVisibility,
    StructuredSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineStats {
    pub line_count: u64,
    /// Sum of line lengths, separators excluded.
    pub total_chars: u64,
    pub avg_line_len: f64,
    pub max_line_len: u64,
}

impl LineStats {
    /// `avg_line_len > limit`, evaluated exactly on integers.
    fn avg_exceeds(&self, limit: u64) -> bool {
        self.total_chars > limit.saturating_mul(self.line_count)
    }
}

/// Per-line statistics over `\n`-separated content. A trailing newline does not
/// start an extra line.
pub fn compute_line_stats(content: &str) -> LineStats {
    if content.is_empty() {
        return LineStats {
            line_count: 0,
            total_chars: 0,
            avg_line_len: 0.0,
            max_line_len: 0,
        };
    }
    let body = content.strip_suffix('\n').unwrap_or(content);
    let mut line_count = 0u64;
    let mut total_chars = 0u64;
    let mut max_line_len = 0u64;
    for line in body.split('\n') {
        let len = line.chars().count() as u64;
        line_count += 1;
        total_chars += len;
        max_line_len = max_line_len.max(len);
    }
    LineStats {
        line_count,
        total_chars,
        avg_line_len: total_chars as f64 / line_count as f64,
        max_line_len,
    }
}

fn alphabetic_counts(content: &str) -> (u64, u64) {
    content.chars().fold((0, 0), |(alpha, total), c| {
        (alpha + u64::from(c.is_alphabetic()), total + 1)
    })
}

/// Fraction of scalar values with the Unicode `Alphabetic` property.
pub fn alphabetic_fraction(content: &str) -> f64 {
    let (alpha, total) = alphabetic_counts(content);
    if total == 0 {
        0.0
    } else {
        alpha as f64 / total as f64
    }
}

pub fn xml_header_hit(content: &str, language: &str, cfg: &FilterConfig) -> bool {
    if cfg.is_xml_exempt(language) {
        return false;
    }
    match content.find(XML_HEADER) {
        Some(byte_idx) => (content[..byte_idx].chars().count() as u64) < cfg.xml_probe_window,
        None => false,
    }
}

fn is_html(language: &str) -> bool {
    language.eq_ignore_ascii_case("html")
}

fn is_structured(language: &str) -> bool {
    ["json", "yaml", "yml"]
        .iter()
        .any(|l| language.eq_ignore_ascii_case(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictStats {
    #[serde(flatten)]
    pub lines: LineStats,
    pub char_count: u64,
    pub alpha_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_chars: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub keep: bool,
    pub rule_fired: FilterRule,
    pub stats: VerdictStats,
}

/// JSONL audit line for one verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterAuditRecord {
    pub id: String,
    pub keep: bool,
    pub rule_fired: FilterRule,
    pub stats: VerdictStats,
}

impl FilterAuditRecord {
    pub fn new(id: &str, verdict: &FilterVerdict) -> Self {
        FilterAuditRecord {
            id: id.to_string(),
            keep: verdict.keep,
            rule_fired: verdict.rule_fired,
            stats: verdict.stats,
        }
    }
}

pub fn filter_document(doc: &SourceDocument, cfg: &FilterConfig) -> FilterVerdict {
    filter_content(&doc.content, &doc.language, cfg)
}

pub fn filter_content(content: &str, language: &str, cfg: &FilterConfig) -> FilterVerdict {
    let lines = compute_line_stats(content);
    let (alpha, char_count) = alphabetic_counts(content);
    let alpha_fraction = if char_count == 0 {
        0.0
    } else {
        alpha as f64 / char_count as f64
    };
    let mut stats = VerdictStats {
        lines,
        char_count,
        alpha_fraction,
        visible_chars: None,
        visible_ratio: None,
    };

    let rule = if lines.avg_exceeds(cfg.avg_line_limit) {
        FilterRule::AvgLine
    } else if lines.max_line_len > cfg.max_line_limit {
        FilterRule::MaxLine
    } else if alpha_fraction < cfg.min_alpha_fraction {
        FilterRule::AlphaFraction
    } else if xml_header_hit(content, language, cfg) {
        FilterRule::XmlHeader
    } else if is_html(language) {
        let html = html_visible_stats(content);
        stats.visible_chars = Some(html.visible_chars as u64);
        stats.visible_ratio = Some(html.visible_ratio);
        let kept = html.visible_ratio >= cfg.html_min_visible_fraction
            && html.visible_chars as u64 >= cfg.html_min_visible_chars;
        if kept {
            FilterRule::None
        } else {
            FilterRule::HtmlVisibility
        }
    } else if is_structured(language)
        && !(cfg.structured_min_chars..=cfg.structured_max_chars).contains(&char_count)
    {
        FilterRule::StructuredSize
    } else {
        FilterRule::None
    };

    FilterVerdict {
        keep: rule == FilterRule::None,
        rule_fired: rule,
        stats,
    }
}
