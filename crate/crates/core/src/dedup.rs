//! MinHash + LSH near-deduplication.
//!
//! Documents are split on whitespace, every `shingle_k`-token window is hashed
//! to 64 bits, and a signature of `num_hashes` minima is taken under seeded
//! universal hash functions `(a * x + b) mod (2^61 - 1)`. Signatures are cut
//! into `bands` bands of `rows` values; documents sharing any band bucket are
//! candidate pairs, verified against `jaccard_threshold`, and unioned into
//! clusters. Each cluster keeps its member with the smallest id.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::{xxh3_64, xxh3_64_with_seed};

use crate::corpus::SourceDocument;

const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Debug, Error, PartialEq)]
pub enum DedupError {
    #[error("empty-document")]
    EmptyDocument,
    #[error("signatures were built with different hash configurations")]
    MismatchedSignatures,
    #[error("invalid dedup config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub shingle_k: usize,
    pub num_hashes: usize,
    pub bands: usize,
    pub rows: usize,
    pub jaccard_threshold: f64,
    pub seed: u64,
    /// Verify candidate pairs with exact shingle-set Jaccard instead of the
    /// signature estimate.
    pub exact_verify: bool,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            shingle_k: 5,
            num_hashes: 128,
            bands: 16,
            rows: 8,
            jaccard_threshold: 0.85,
            seed: 0,
            exact_verify: false,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.shingle_k == 0 {
            return Err(DedupError::InvalidConfig("shingle_k must be >= 1".into()));
        }
        if self.num_hashes == 0 || self.bands * self.rows != self.num_hashes {
            return Err(DedupError::InvalidConfig(format!(
                "bands ({}) x rows ({}) must equal num_hashes ({})",
                self.bands, self.rows, self.num_hashes
            )));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold < 1.0) {
            return Err(DedupError::InvalidConfig(
                "jaccard_threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Sorted, deduplicated 64-bit shingle hashes of `content`.
pub fn shingle(content: &str, k: usize) -> BTreeSet<u64> {
    assert!(k >= 1, "shingle size must be at least 1");
    let tokens: Vec<&str> = content.split_whitespace().collect();
    if tokens.is_empty() {
        return BTreeSet::new();
    }
    let k = k.min(tokens.len());
    tokens
        .windows(k)
        .map(|w| xxh3_64(w.join(" ").as_bytes()))
        .collect()
}

/// Exact Jaccard similarity of two sets; two empty sets compare as 1.
pub fn exact_jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Seeded family of `(a * x + b) mod p` hash functions.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seed: u64,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..num_hashes)
            .map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61)))
            .collect();
        MinHasher { seed, coeffs }
    }

    pub fn num_hashes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn signature(
        &self,
        doc_id: impl Into<String>,
        shingles: &BTreeSet<u64>,
    ) -> Result<MinHashSignature, DedupError> {
        if shingles.is_empty() {
            return Err(DedupError::EmptyDocument);
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for &s in shingles {
            // Premix so small raw integers still spread over the field.
            let x = xxh3_64_with_seed(&s.to_le_bytes(), self.seed) % MERSENNE_61;
            for (v, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = mod_mersenne(u128::from(a) * u128::from(x) + u128::from(b));
                if h < *v {
                    *v = h;
                }
            }
        }
        Ok(MinHashSignature {
            doc_id: doc_id.into(),
            seed: self.seed,
            values,
        })
    }
}

fn mod_mersenne(v: u128) -> u64 {
    let p = u128::from(MERSENNE_61);
    let folded = (v & p) + (v >> 61);
    let folded = (folded & p) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub doc_id: String,
    pub seed: u64,
    pub values: Vec<u64>,
}

pub fn minhash(
    doc_id: impl Into<String>,
    shingles: &BTreeSet<u64>,
    cfg: &DedupConfig,
) -> Result<MinHashSignature, DedupError> {
    MinHasher::new(cfg.num_hashes, cfg.seed).signature(doc_id, shingles)
}

/// Fraction of signature positions that agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    if a.seed != b.seed || a.values.len() != b.values.len() || a.values.is_empty() {
        return Err(DedupError::MismatchedSignatures);
    }
    let agree = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    pub representative: String,
    /// Sorted member ids, representative included.
    pub members: Vec<String>,
    /// Smallest similarity among the verified pairs that formed the cluster.
    pub estimated_jaccard_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    /// Kept ids in input order.
    pub kept: Vec<String>,
    pub clusters: Vec<DuplicateCluster>,
}

impl DedupOutcome {
    pub fn removed_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len() - 1).sum()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn band_key(values: &[u64], band: usize) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    xxh3_64_with_seed(&bytes, band as u64)
}

/// Near-deduplicate `docs`. Whitespace-only documents carry no shingles and
/// are always kept unclustered.
pub fn dedup_corpus(docs: &[SourceDocument], cfg: &DedupConfig) -> Result<DedupOutcome, DedupError> {
    cfg.validate()?;
    let hasher = MinHasher::new(cfg.num_hashes, cfg.seed);

    let prepared: Vec<(BTreeSet<u64>, Option<MinHashSignature>)> = docs
        .par_iter()
        .map(|doc| {
            let shingles = shingle(&doc.content, cfg.shingle_k);
            let sig = hasher.signature(doc.id.as_str(), &shingles).ok();
            let shingles = if cfg.exact_verify {
                shingles
            } else {
                BTreeSet::new()
            };
            (shingles, sig)
        })
        .collect();

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for band in 0..cfg.bands {
        let range = band * cfg.rows..(band + 1) * cfg.rows;
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (idx, (_, sig)) in prepared.iter().enumerate() {
            if let Some(sig) = sig {
                buckets
                    .entry(band_key(&sig.values[range.clone()], band))
                    .or_default()
                    .push(idx);
            }
        }
        for members in buckets.values().filter(|m| m.len() > 1) {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    candidates.insert((a, b));
                }
            }
        }
    }

    let mut uf = UnionFind::new(docs.len());
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for (a, b) in candidates {
        let sim = if cfg.exact_verify {
            exact_jaccard(&prepared[a].0, &prepared[b].0)
        } else {
            let (sa, sb) = (prepared[a].1.as_ref(), prepared[b].1.as_ref());
            estimate_jaccard(sa.expect("bucketed"), sb.expect("bucketed"))?
        };
        if sim >= cfg.jaccard_threshold {
            uf.union(a, b);
            edges.push((a, b, sim));
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for idx in 0..docs.len() {
        let root = uf.find(idx);
        groups.entry(root).or_default().push(idx);
    }
    let mut min_sim: HashMap<usize, f64> = HashMap::new();
    for (a, _, sim) in &edges {
        let root = uf.find(*a);
        let entry = min_sim.entry(root).or_insert(f64::INFINITY);
        *entry = entry.min(*sim);
    }

    let mut dropped = vec![false; docs.len()];
    let mut clusters = Vec::new();
    for (root, members) in groups.into_iter().filter(|(_, m)| m.len() > 1) {
        let rep = *members
            .iter()
            .min_by(|&&x, &&y| docs[x].id.cmp(&docs[y].id))
            .expect("non-empty cluster");
        for &m in &members {
            dropped[m] = m != rep;
        }
        let mut ids: Vec<String> = members.iter().map(|&m| docs[m].id.clone()).collect();
        ids.sort();
        clusters.push(DuplicateCluster {
            representative: docs[rep].id.clone(),
            members: ids,
            estimated_jaccard_min: min_sim[&root],
        });
    }
    clusters.sort_by(|a, b| a.representative.cmp(&b.representative));

    let kept = docs
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(doc, _)| doc.id.clone())
        .collect();
    Ok(DedupOutcome { kept, clusters })
}
