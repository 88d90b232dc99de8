//! Byte-level BPE tokenizer with a small deterministic trainer.
//!
//! Ids `0..256` are raw bytes, `256..256 + merges.len()` are merged tokens in
//! rank order, and the four sentinel tokens follow. Text is first cut into
//! chunks (letter runs, digit runs, punctuation runs, whitespace runs, with an
//! optional single leading space) and merges never cross a chunk boundary.
//!
//! Sentinels are only ever inserted by the FIM stage: raw text that happens
//! to spell a sentinel encodes as ordinary bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BYTE_TOKENS: usize = 256;
pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {requested} is below the {minimum} byte and sentinel tokens")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid vocab file: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialToken {
    FimBegin,
    FimHole,
    FimEnd,
    Eos,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 4] = [
        SpecialToken::FimBegin,
        SpecialToken::FimHole,
        SpecialToken::FimEnd,
        SpecialToken::Eos,
    ];

    /// Canonical surface string. The FIM sentinels use fullwidth bars (U+FF5C).
    pub fn surface(self) -> &'static str {
        match self {
            SpecialToken::FimBegin => "<\u{ff5c}fim_begin\u{ff5c}>",
            SpecialToken::FimHole => "<\u{ff5c}fim_hole\u{ff5c}>",
            SpecialToken::FimEnd => "<\u{ff5c}fim_end\u{ff5c}>",
            SpecialToken::Eos => "<|eos_token|>",
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

fn chunk_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+")
            .expect("chunk pattern compiles")
    })
}

/// Byte ranges of the pre-tokenization chunks; they tile `text`.
fn chunks(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    chunk_regex().find_iter(text).map(|m| (m.start(), m.end()))
}

/// Encoded ids with the byte span of each token in the source text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    merges: Vec<[u32; 2]>,
    special_tokens: BTreeMap<SpecialToken, u32>,
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
    special_tokens: BTreeMap<SpecialToken, u32>,
    special_by_id: HashMap<u32, SpecialToken>,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.special_tokens == other.special_tokens
    }
}

impl BpeVocab {
    /// Vocabulary with no merges: every byte is its own token.
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    /// Build from merges in rank order; sentinels get the ids following the merges.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, BpeError> {
        let first_special = (BYTE_TOKENS + merges.len()) as u32;
        let specials = SpecialToken::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, first_special + i as u32))
            .collect();
        Self::from_parts(merges, specials)
    }

    fn from_parts(
        merges: Vec<(u32, u32)>,
        special_tokens: BTreeMap<SpecialToken, u32>,
    ) -> Result<Self, BpeError> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = token_bytes.len() as u32;
            // A merge may only reference tokens that already exist, which
            // rules out cycles.
            if l >= next || r >= next {
                return Err(BpeError::InvalidVocab(format!(
                    "merge {rank} references undefined token ({l}, {r})"
                )));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(BpeError::InvalidVocab(format!("duplicate merge ({l}, {r})")));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
        }

        let base = token_bytes.len() as u32;
        let mut special_by_id = HashMap::new();
        for s in SpecialToken::ALL {
            let id = *special_tokens
                .get(&s)
                .ok_or_else(|| BpeError::InvalidVocab(format!("missing special token {s:?}")))?;
            if id < base || id >= base + SpecialToken::ALL.len() as u32 {
                return Err(BpeError::InvalidVocab(format!(
                    "special token {s:?} id {id} outside [{base}, {})",
                    base + SpecialToken::ALL.len() as u32
                )));
            }
            if special_by_id.insert(id, s).is_some() {
                return Err(BpeError::InvalidVocab(format!("special id {id} assigned twice")));
            }
        }

        Ok(BpeVocab {
            merges,
            ranks,
            token_bytes,
            special_tokens,
            special_by_id,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Total number of ids, sentinels included.
    pub fn len(&self) -> usize {
        self.token_bytes.len() + self.special_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn special_id(&self, token: SpecialToken) -> u32 {
        self.special_tokens[&token]
    }

    pub fn special_tokens(&self) -> &BTreeMap<SpecialToken, u32> {
        &self.special_tokens
    }

    pub fn special_for_id(&self, id: u32) -> Option<SpecialToken> {
        self.special_by_id.get(&id).copied()
    }

    /// Bytes of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            special_tokens: self.special_tokens.clone(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, BpeError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(BpeError::InvalidVocab(format!(
                "unsupported vocab version {}",
                file.version
            )));
        }
        Self::from_parts(
            file.merges.into_iter().map(|[l, r]| (l, r)).collect(),
            file.special_tokens,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Apply merges by ascending rank within one chunk.
    fn encode_chunk(&self, bytes: &[u8], ids: &mut Vec<u32>, offsets: &mut Vec<(usize, usize)>, base: usize) {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let merged = BYTE_TOKENS as u32 + rank;
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
        let mut pos = base;
        for id in symbols {
            let len = self.token_bytes[id as usize].len();
            ids.push(id);
            offsets.push((pos, pos + len));
            pos += len;
        }
    }

    /// Encode `text`; offsets are byte spans that partition `0..text.len()`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for (start, end) in chunks(text) {
            self.encode_chunk(&text.as_bytes()[start..end], &mut seq.ids, &mut seq.offsets, start);
        }
        seq
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        self.encode(text).ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(s) = self.special_for_id(id) {
                out.extend_from_slice(s.surface().as_bytes());
            } else {
                let bytes = self.token_bytes(id).ok_or(BpeError::UnknownId(id))?;
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| BpeError::InvalidUtf8)
    }

    /// Lowercased surface tokens for classifier features. Tokens that split a
    /// multi-byte character are glued to their neighbours so every piece is a
    /// whole string; the pieces concatenate back to the lowercased input.
    pub fn pretokenize_for_classifier(&self, text: &str) -> Vec<String> {
        let lowered = text.to_lowercase();
        let seq = self.encode(&lowered);
        let mut pieces = Vec::with_capacity(seq.len());
        let mut start = 0;
        for &(_, end) in &seq.offsets {
            if lowered.is_char_boundary(end) {
                pieces.push(lowered[start..end].to_string());
                start = end;
            }
        }
        pieces
    }
}

pub fn encode(text: &str, vocab: &BpeVocab) -> TokenSequence {
    vocab.encode(text)
}

pub fn decode(ids: &[u32], vocab: &BpeVocab) -> Result<String, BpeError> {
    vocab.decode(ids)
}

pub fn pretokenize_for_classifier(text: &str, vocab: &BpeVocab) -> Vec<String> {
    vocab.pretokenize_for_classifier(text)
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: (Vec<u8>, Vec<u8>),
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: higher count first, then the lexicographically smaller pair
        self.count
            .cmp(&other.count)
            .then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn pairs_of(word: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    word.windows(2).map(|w| (w[0], w[1]))
}

/// Train merges greedily on `corpus` until the vocabulary (sentinels included)
/// reaches `vocab_size` or no pair occurs at least twice. Ties go to the
/// lexicographically smaller `(left bytes, right bytes)` pair.
pub fn train_bpe<'a, I>(corpus: I, vocab_size: usize) -> Result<BpeVocab, BpeError>
where
    I: IntoIterator<Item = &'a str>,
{
    let minimum = BYTE_TOKENS + SpecialToken::ALL.len();
    if vocab_size < minimum {
        return Err(BpeError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut chunk_counts: BTreeMap<&'a str, u64> = BTreeMap::new();
    let mut total_bytes = 0usize;
    for doc in corpus {
        total_bytes += doc.len();
        for (s, e) in chunks(doc) {
            *chunk_counts.entry(&doc[s..e]).or_insert(0) += 1;
        }
    }
    if total_bytes == 0 {
        return Err(BpeError::EmptyCorpus);
    }

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(chunk_counts.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(chunk_counts.len());
    for (chunk, count) in chunk_counts {
        words.push(chunk.bytes().map(u32::from).collect());
        freqs.push(count);
    }

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (idx, word) in words.iter().enumerate() {
        for p in pairs_of(word) {
            *pair_counts.entry(p).or_insert(0) += freqs[idx];
            pair_words.entry(p).or_default().insert(idx);
        }
    }

    let candidate = |pair: (u32, u32), count: u64, token_bytes: &[Vec<u8>]| Candidate {
        count,
        key: (
            token_bytes[pair.0 as usize].clone(),
            token_bytes[pair.1 as usize].clone(),
        ),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, &token_bytes))
        .collect();

    let target_merges = vocab_size - minimum;
    let mut merges: Vec<(u32, u32)> = Vec::new();
    while merges.len() < target_merges {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            continue;
        }
        if top.count < 2 {
            break;
        }

        let pair = top.pair;
        let new_id = token_bytes.len() as u32;
        let mut bytes = token_bytes[pair.0 as usize].clone();
        bytes.extend_from_slice(&token_bytes[pair.1 as usize]);
        token_bytes.push(bytes);
        merges.push(pair);

        let mut affected: Vec<usize> = pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for idx in affected {
            let word = &words[idx];
            if !pairs_of(word).any(|p| p == pair) {
                continue;
            }
            let freq = freqs[idx];
            for p in pairs_of(word) {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= freq;
                }
                touched.insert(p);
            }
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(word[i]);
                    i += 1;
                }
            }
            for p in pairs_of(&merged) {
                *pair_counts.entry(p).or_insert(0) += freq;
                pair_words.entry(p).or_default().insert(idx);
                touched.insert(p);
            }
            words[idx] = merged;
        }
        pair_counts.remove(&pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(0) => {
                    pair_counts.remove(&p);
                }
                Some(c) if p != pair => heap.push(candidate(p, c, &token_bytes)),
                _ => {}
            }
        }
    }

    BpeVocab::from_merges(merges)
}
