//! Iterative classifier-driven domain recall.
//!
//! Each round trains a classifier on the current seed (positives) against
//! uniformly sampled non-seed candidates (negatives), scores every candidate,
//! computes per-domain collected fractions, promotes domains strictly above
//! `domain_threshold`, and adds the uncollected pages of promoted domains that
//! match an annotated URL pattern to the seed.

pub mod classifier;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::bpe::BpeVocab;
use crate::corpus::{Origin, SourceDocument};
pub use classifier::{
    train_classifier, FeatureBag, Gradients, LabeledExample, RecallClassifier, TrainSummary,
};

#[derive(Debug, Error)]
pub enum RecallError {
    #[error("degenerate-labels: training needs both relevant and irrelevant examples")]
    DegenerateLabels,
    #[error("seed set is empty")]
    EmptySeed,
    #[error("invalid recall config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallConfig {
    pub iterations: usize,
    /// Domains are promoted when their collected fraction is strictly above this.
    pub domain_threshold: f64,
    /// Pages are collected when P(relevant) is strictly above this.
    pub score_threshold: f64,
    pub ngram_orders: Vec<usize>,
    /// Power of two.
    pub feature_buckets: u32,
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Half-width of the uniform embedding initialization.
    pub init_scale: f64,
    /// Negatives sampled per seed positive each round.
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            iterations: 3,
            domain_threshold: 0.10,
            score_threshold: 0.5,
            ngram_orders: vec![1, 2],
            feature_buckets: 1 << 20,
            embed_dim: 64,
            epochs: 5,
            learning_rate: 0.5,
            init_scale: 1.0,
            negative_ratio: 1.0,
            seed: 0,
        }
    }
}

impl RecallConfig {
    /// Three rounds for web pages, two for GitHub.
    pub fn for_origin(origin: Origin) -> Self {
        RecallConfig {
            iterations: match origin {
                Origin::Web => 3,
                Origin::Github => 2,
            },
            ..RecallConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), RecallError> {
        let bad = |m: &str| Err(RecallError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.domain_threshold > 0.0 && self.domain_threshold < 1.0) {
            return bad("domain_threshold must lie in (0, 1)");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return bad("score_threshold must lie in (0, 1)");
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return bad("ngram_orders must be non-empty and positive");
        }
        if !self.feature_buckets.is_power_of_two() {
            return bad("feature_buckets must be a power of two");
        }
        if self.embed_dim == 0 || self.epochs == 0 {
            return bad("embed_dim and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.init_scale > 0.0) || !(self.negative_ratio > 0.0) {
            return bad("learning_rate, init_scale and negative_ratio must be positive");
        }
        Ok(())
    }
}

/// Hashed n-gram feature indices, in order: all n-grams of the first order,
/// then the next order, and so on.
pub fn extract_features<S: AsRef<str>>(tokens: &[S], cfg: &RecallConfig) -> Vec<u32> {
    let mask = u64::from(cfg.feature_buckets) - 1;
    let mut out = Vec::new();
    let mut buf = Vec::new();
    for &n in &cfg.ngram_orders {
        if n == 0 || tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            buf.clear();
            for (i, t) in window.iter().enumerate() {
                if i > 0 {
                    buf.push(0x1f);
                }
                buf.extend_from_slice(t.as_ref().as_bytes());
            }
            out.push((xxh3_64_with_seed(&buf, n as u64) & mask) as u32);
        }
    }
    out
}

pub fn featurize(text: &str, vocab: &BpeVocab, cfg: &RecallConfig) -> FeatureBag {
    let tokens = vocab.pretokenize_for_classifier(text);
    FeatureBag::from_indices(&extract_features(&tokens, cfg))
}

/// P(relevant) for a document.
pub fn score_page(
    model: &RecallClassifier,
    doc: &SourceDocument,
    vocab: &BpeVocab,
    cfg: &RecallConfig,
) -> f64 {
    model.prob_relevant(&featurize(&doc.content, vocab, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub total_pages: u64,
    pub collected_pages: u64,
    pub collected_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageObservation<'a> {
    pub domain: &'a str,
    pub collected: bool,
}

/// Per-domain collected fractions, sorted by domain.
pub fn domain_stats<'a>(pages: impl IntoIterator<Item = PageObservation<'a>>) -> Vec<DomainStats> {
    let mut acc: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for p in pages {
        let e = acc.entry(p.domain).or_insert((0, 0));
        e.0 += 1;
        e.1 += u64::from(p.collected);
    }
    acc.into_iter()
        .map(|(domain, (total, collected))| DomainStats {
            domain: domain.to_string(),
            total_pages: total,
            collected_pages: collected,
            collected_fraction: collected as f64 / total as f64,
        })
        .collect()
}

/// Domains whose collected fraction is strictly above `cfg.domain_threshold`.
pub fn promote_domains<'a>(
    pages: impl IntoIterator<Item = PageObservation<'a>>,
    cfg: &RecallConfig,
) -> Vec<DomainStats> {
    domain_stats(pages)
        .into_iter()
        .filter(|d| d.collected_fraction > cfg.domain_threshold)
        .collect()
}

/// Annotated URL prefixes. A pattern starting with `/` matches the path of a
/// page in any promoted domain; anything else matches against
/// `host/path?query` with the scheme and a leading `www.` removed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UrlPatterns {
    patterns: Vec<String>,
}

fn strip_url(url: &str) -> String {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    let (host, path) = rest.split_at(rest.find('/').unwrap_or(rest.len()));
    let host = host.to_ascii_lowercase();
    let host = host.strip_prefix("www.").unwrap_or(&host);
    format!("{host}{path}")
}

impl UrlPatterns {
    /// One prefix per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let patterns = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| if l.starts_with('/') { l.to_string() } else { strip_url(l) })
            .collect();
        UrlPatterns { patterns }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn matches(&self, url: &str) -> bool {
        let stripped = strip_url(url);
        let path = stripped.find('/').map_or("", |i| &stripped[i..]);
        self.patterns.iter().any(|p| {
            if p.starts_with('/') {
                path.starts_with(p.as_str())
            } else {
                stripped.starts_with(p.as_str())
            }
        })
    }
}

/// A candidate page as seen by the seed-growth step.
#[derive(Debug, Clone, Copy)]
pub struct IndexedPage<'a> {
    pub id: &'a str,
    pub url: Option<&'a str>,
    pub domain: Option<&'a str>,
    pub collected: bool,
}

/// Add every uncollected page of a promoted domain whose URL matches an
/// annotated pattern. The result always contains `seed`.
pub fn annotate_and_grow_seed(
    promoted: &[DomainStats],
    patterns: &UrlPatterns,
    pages: &[IndexedPage<'_>],
    seed: &BTreeSet<String>,
) -> BTreeSet<String> {
    let promoted: BTreeSet<&str> = promoted.iter().map(|d| d.domain.as_str()).collect();
    let mut grown = seed.clone();
    for page in pages {
        let (Some(domain), Some(url)) = (page.domain, page.url) else {
            continue;
        };
        if !page.collected && promoted.contains(domain) && patterns.matches(url) {
            grown.insert(page.id.to_string());
        }
    }
    grown
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallIterationReport {
    pub iteration: usize,
    pub classifier_loss: f64,
    pub pages_recalled: usize,
    pub domains_promoted: Vec<String>,
    pub seed_size_before: usize,
    pub seed_size_after: usize,
}

#[derive(Debug, Clone)]
pub struct RecallOutcome {
    /// Candidate ids collected after the final round (recalled by the final
    /// classifier, or in the final seed), in candidate order.
    pub collected: Vec<String>,
    pub seed: BTreeSet<String>,
    pub reports: Vec<RecallIterationReport>,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(&(iteration as u64).to_le_bytes(), seed))
}

/// Run `cfg.iterations` rounds of train, score, promote and grow.
///
/// `seed_docs` may include pages that are not candidates (for example a
/// curated seed crawl); those only ever serve as positives.
pub fn run_recall_loop(
    candidates: &[SourceDocument],
    seed_docs: &[SourceDocument],
    patterns: &UrlPatterns,
    cfg: &RecallConfig,
    vocab: &BpeVocab,
) -> Result<RecallOutcome, RecallError> {
    cfg.validate()?;
    if seed_docs.is_empty() {
        return Err(RecallError::EmptySeed);
    }

    let candidate_bags: Vec<FeatureBag> = candidates
        .par_iter()
        .map(|d| featurize(&d.content, vocab, cfg))
        .collect();
    let candidate_ids: BTreeSet<&str> = candidates.iter().map(|d| d.id.as_str()).collect();
    let external_bags: Vec<FeatureBag> = seed_docs
        .iter()
        .filter(|d| !candidate_ids.contains(d.id.as_str()))
        .map(|d| featurize(&d.content, vocab, cfg))
        .collect();

    let mut seed: BTreeSet<String> = seed_docs.iter().map(|d| d.id.clone()).collect();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut collected_flags = vec![false; candidates.len()];

    for iteration in 1..=cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, iteration);
        let in_seed: Vec<bool> = candidates.iter().map(|d| seed.contains(&d.id)).collect();

        let mut examples: Vec<LabeledExample> = external_bags
            .iter()
            .map(|b| LabeledExample {
                features: b.clone(),
                relevant: true,
            })
            .collect();
        examples.extend(in_seed.iter().zip(&candidate_bags).filter(|(s, _)| **s).map(|(_, b)| {
            LabeledExample {
                features: b.clone(),
                relevant: true,
            }
        }));
        let pool: Vec<usize> = (0..candidates.len()).filter(|&i| !in_seed[i]).collect();
        let want = ((examples.len() as f64 * cfg.negative_ratio).round() as usize).clamp(1, pool.len().max(1));
        if !pool.is_empty() {
            let picks = rand::seq::index::sample(&mut rng, pool.len(), want.min(pool.len()));
            let mut picks: Vec<usize> = picks.into_iter().map(|k| pool[k]).collect();
            picks.sort_unstable();
            examples.extend(picks.into_iter().map(|i| LabeledExample {
                features: candidate_bags[i].clone(),
                relevant: false,
            }));
        }

        let round_cfg = RecallConfig {
            seed: xxh3_64_with_seed(b"classifier", cfg.seed ^ iteration as u64),
            ..cfg.clone()
        };
        let (model, summary) = train_classifier(&examples, &round_cfg)?;

        let scores: Vec<f64> = candidate_bags.par_iter().map(|b| model.prob_relevant(b)).collect();
        let recalled: Vec<bool> = scores.iter().map(|&s| s > cfg.score_threshold).collect();
        let pages_recalled = recalled.iter().filter(|&&r| r).count();
        collected_flags = recalled
            .iter()
            .zip(&in_seed)
            .map(|(&r, &s)| r || s)
            .collect();

        let promoted = promote_domains(
            candidates
                .iter()
                .zip(&collected_flags)
                .filter_map(|(d, &collected)| {
                    d.domain.as_deref().map(|domain| PageObservation { domain, collected })
                }),
            cfg,
        );
        let pages: Vec<IndexedPage<'_>> = candidates
            .iter()
            .zip(&collected_flags)
            .map(|(d, &collected)| IndexedPage {
                id: &d.id,
                url: d.url.as_deref(),
                domain: d.domain.as_deref(),
                collected,
            })
            .collect();
        let before = seed.len();
        seed = annotate_and_grow_seed(&promoted, patterns, &pages, &seed);
        log::info!(
            "recall round {iteration}: loss {:.4}, recalled {pages_recalled}, promoted {}, seed {before} -> {}",
            summary.final_loss,
            promoted.len(),
            seed.len()
        );
        reports.push(RecallIterationReport {
            iteration,
            classifier_loss: summary.final_loss,
            pages_recalled,
            domains_promoted: promoted.into_iter().map(|d| d.domain).collect(),
            seed_size_before: before,
            seed_size_after: seed.len(),
        });
    }

    let collected = candidates
        .iter()
        .zip(&collected_flags)
        .filter(|(d, &c)| c || seed.contains(&d.id))
        .map(|(d, _)| d.id.clone())
        .collect();
    Ok(RecallOutcome {
        collected,
        seed,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_count_law() {
        let cfg = RecallConfig::default();
        let f = extract_features(&["a", "b", "c"], &cfg);
        assert_eq!(f.len(), 5);
        assert_eq!(f, extract_features(&["a", "b", "c"], &cfg));
        assert!(extract_features::<&str>(&[], &cfg).is_empty());
        assert!(f.iter().all(|&i| i < cfg.feature_buckets));
        // tiny table forces collisions; size is unaffected
        let tiny = RecallConfig { feature_buckets: 2, ..cfg };
        let f = extract_features(&["a", "b", "c", "d", "e"], &tiny);
        assert_eq!(f.len(), 9);
        assert!(f.iter().all(|&i| i < 2));
    }

    fn obs(domain: &str, collected: usize, total: usize) -> Vec<PageObservation<'_>> {
        (0..total)
            .map(|i| PageObservation {
                domain,
                collected: i < collected,
            })
            .collect()
    }

    #[test]
    fn promotion_is_strict() {
        let cfg = RecallConfig::default();
        let mut pages = obs("a.com", 3, 20);
        pages.extend(obs("b.com", 1, 10));
        pages.extend(obs("c.com", 0, 50));
        pages.extend(obs("d.com", 2, 20));
        let promoted = promote_domains(pages.iter().copied(), &cfg);
        assert_eq!(promoted.len(), 1);
        assert_eq!(promoted[0].domain, "a.com");
        assert_eq!(promoted[0].collected_fraction, 0.15);
        // order independence
        pages.reverse();
        assert_eq!(promote_domains(pages, &cfg), promoted);
    }

    #[test]
    fn url_patterns() {
        let p = UrlPatterns::parse("# comment\nhttps://www.StackOverflow.com/questions/\n\n/docs/\n");
        assert_eq!(p.len(), 2);
        assert!(p.matches("http://stackoverflow.com/questions/1"));
        assert!(!p.matches("https://stackoverflow.com/users/1"));
        assert!(p.matches("https://pytorch.org/docs/stable"));
        assert!(!p.matches("https://pytorch.org/blog/docs/"));
    }

    fn page<'a>(id: &'a str, url: &'a str, collected: bool) -> IndexedPage<'a> {
        IndexedPage {
            id,
            url: Some(url),
            domain: Some("m.org"),
            collected,
        }
    }

    #[test]
    fn seed_growth() {
        let patterns = UrlPatterns::parse("m.org/q/");
        let promoted = vec![DomainStats {
            domain: "m.org".into(),
            total_pages: 10,
            collected_pages: 2,
            collected_fraction: 0.2,
        }];
        let pages = vec![
            page("p1", "https://m.org/q/1", false),
            page("p2", "https://m.org/q/2", false),
            page("p3", "https://m.org/q/3", false),
            page("p4", "https://m.org/q/4", false),
            page("p5", "https://m.org/q/5", true),
            page("p6", "https://m.org/blog/6", false),
        ];
        let seed: BTreeSet<String> = ["s1".to_string()].into();
        assert_eq!(annotate_and_grow_seed(&[], &patterns, &pages, &seed), seed);
        let grown = annotate_and_grow_seed(&promoted, &patterns, &pages, &seed);
        assert_eq!(grown.len(), seed.len() + 4);
        let seed2: BTreeSet<String> = ["s1".to_string(), "p1".to_string()].into();
        let grown2 = annotate_and_grow_seed(&promoted, &patterns, &pages, &seed2);
        assert_eq!(grown2.len(), 5);
        assert!(grown2.is_superset(&seed2));
    }

    #[test]
    fn config_validation() {
        assert!(RecallConfig::default().validate().is_ok());
        assert_eq!(RecallConfig::for_origin(Origin::Github).iterations, 2);
        assert_eq!(RecallConfig::for_origin(Origin::Web).iterations, 3);
        assert!(RecallConfig { feature_buckets: 1000, ..Default::default() }.validate().is_err());
        assert!(RecallConfig { domain_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(RecallConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_seed_errors() {
        let vocab = BpeVocab::byte_level();
        let r = run_recall_loop(&[], &[], &UrlPatterns::default(), &RecallConfig::default(), &vocab);
        assert!(matches!(r, Err(RecallError::EmptySeed)));
    }
}
