//! Fill-in-the-middle transformation (PSM order), fixed-ratio corpus mixing and
//! packing into fixed-length training sequences.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::bpe::{BpeVocab, SpecialToken};
use crate::corpus::CorpusCategory;

#[derive(Debug, Error)]
pub enum FimError {
    #[error("empty-document")]
    EmptyDocument,
    #[error("cut points ({0}, {1}) out of range for a document of {2} chars")]
    BadCuts(usize, usize, usize),
    #[error("document {0} does not end with eos")]
    MissingEos(String),
    #[error("invalid fim config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum MixError {
    #[error("category-underrun: {0} ran out before the target size")]
    CategoryUnderrun(CorpusCategory),
    #[error("invalid ratios: {0}")]
    InvalidRatios(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FimConfig {
    pub fim_rate: f64,
    pub context_length: usize,
    pub rng_seed: u64,
}

impl Default for FimConfig {
    fn default() -> Self {
        FimConfig {
            fim_rate: 0.5,
            context_length: 4096,
            rng_seed: 0,
        }
    }
}

impl FimConfig {
    pub fn validate(&self) -> Result<(), FimError> {
        if !(0.0..=1.0).contains(&self.fim_rate) {
            return Err(FimError::InvalidConfig("fim_rate must lie in [0, 1]".into()));
        }
        if self.context_length <= 4 {
            return Err(FimError::InvalidConfig("context_length must exceed 4".into()));
        }
        Ok(())
    }
}

/// A document cut into prefix, middle and suffix at two char offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FimSplit {
    pub prefix: String,
    pub middle: String,
    pub suffix: String,
    pub cut_points: (usize, usize),
}

impl FimSplit {
    /// Split at char offsets `a <= b <= len`.
    pub fn from_cuts(doc: &str, a: usize, b: usize) -> Result<Self, FimError> {
        let len = doc.chars().count();
        if a > b || b > len {
            return Err(FimError::BadCuts(a, b, len));
        }
        let byte_at = |k: usize| doc.char_indices().nth(k).map_or(doc.len(), |(i, _)| i);
        let (ba, bb) = (byte_at(a), byte_at(b));
        Ok(FimSplit {
            prefix: doc[..ba].to_string(),
            middle: doc[ba..bb].to_string(),
            suffix: doc[bb..].to_string(),
            cut_points: (a, b),
        })
    }

    pub fn reassemble(&self) -> String {
        format!("{}{}{}", self.prefix, self.middle, self.suffix)
    }
}

/// Two distinct cuts drawn uniformly from the `len + 1` char boundaries.
pub fn sample_fim_split<R: Rng + ?Sized>(doc: &str, rng: &mut R) -> Result<FimSplit, FimError> {
    let len = doc.chars().count();
    if len == 0 {
        return Err(FimError::EmptyDocument);
    }
    let picks = rand::seq::index::sample(rng, len + 1, 2);
    let (x, y) = (picks.index(0), picks.index(1));
    FimSplit::from_cuts(doc, x.min(y), x.max(y))
}

/// `[fim_begin] prefix [fim_hole] suffix [fim_end] middle [eos]`.
pub fn encode_psm(split: &FimSplit, vocab: &BpeVocab) -> Vec<u32> {
    let mut ids = vec![vocab.special_id(SpecialToken::FimBegin)];
    ids.extend(vocab.encode_ids(&split.prefix));
    ids.push(vocab.special_id(SpecialToken::FimHole));
    ids.extend(vocab.encode_ids(&split.suffix));
    ids.push(vocab.special_id(SpecialToken::FimEnd));
    ids.extend(vocab.encode_ids(&split.middle));
    ids.push(vocab.special_id(SpecialToken::Eos));
    ids
}

/// Inverse of [`encode_psm`]: decode the three spans and reassemble them in
/// document order. `None` when the layout is not a well-formed PSM sequence.
pub fn decode_psm(ids: &[u32], vocab: &BpeVocab) -> Option<String> {
    let pos = |tok: SpecialToken| {
        let id = vocab.special_id(tok);
        let mut it = ids.iter().enumerate().filter(|(_, &t)| t == id).map(|(i, _)| i);
        match (it.next(), it.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    };
    let (b, h, e, s) = (
        pos(SpecialToken::FimBegin)?,
        pos(SpecialToken::FimHole)?,
        pos(SpecialToken::FimEnd)?,
        pos(SpecialToken::Eos)?,
    );
    if !(b == 0 && b < h && h < e && e < s && s == ids.len() - 1) {
        return None;
    }
    let prefix = vocab.decode(&ids[b + 1..h]).ok()?;
    let suffix = vocab.decode(&ids[h + 1..e]).ok()?;
    let middle = vocab.decode(&ids[e + 1..s]).ok()?;
    Some(format!("{prefix}{middle}{suffix}"))
}

/// A transformed document ready for packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FimDocument {
    pub doc_id: String,
    pub ids: Vec<u32>,
    pub was_fim: bool,
}

/// Generator for one document, derived from `(rng_seed, doc_id)` so documents
/// can be transformed in any order or in parallel.
pub fn doc_rng(rng_seed: u64, doc_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(doc_id.as_bytes(), rng_seed))
}

/// Draw `u < fim_rate` first; if it hits, sample the cuts from the same
/// generator and emit PSM form, otherwise `enc(doc) ++ [eos]`.
pub fn apply_fim_with_rng<R: Rng + ?Sized>(
    text: &str,
    vocab: &BpeVocab,
    fim_rate: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, bool), FimError> {
    if text.is_empty() {
        return Err(FimError::EmptyDocument);
    }
    let u: f64 = rng.gen();
    if u < fim_rate {
        let split = sample_fim_split(text, rng)?;
        Ok((encode_psm(&split, vocab), true))
    } else {
        let mut ids = vocab.encode_ids(text);
        ids.push(vocab.special_id(SpecialToken::Eos));
        Ok((ids, false))
    }
}

pub fn apply_fim(
    doc_id: &str,
    text: &str,
    vocab: &BpeVocab,
    cfg: &FimConfig,
) -> Result<FimDocument, FimError> {
    let mut rng = doc_rng(cfg.rng_seed, doc_id);
    let (ids, was_fim) = apply_fim_with_rng(text, vocab, cfg.fim_rate, &mut rng)?;
    Ok(FimDocument {
        doc_id: doc_id.to_string(),
        ids,
        was_fim,
    })
}

/// A document segment inside one packed sequence, `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBoundary {
    pub start: usize,
    pub end: usize,
    pub doc_id: String,
    pub was_fim: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    pub doc_boundaries: Vec<SegmentBoundary>,
    /// Trailing eos padding; only the last sequence of a stream has any.
    pub padding: usize,
}

/// Greedy packer. Documents that overflow the current sequence are split at a
/// token boundary and continue in the next one.
#[derive(Debug)]
pub struct SequencePacker {
    context_length: usize,
    eos: u32,
    current: Vec<u32>,
    boundaries: Vec<SegmentBoundary>,
}

impl SequencePacker {
    pub fn new(context_length: usize, eos: u32) -> Self {
        SequencePacker {
            context_length,
            eos,
            current: Vec::with_capacity(context_length),
            boundaries: Vec::new(),
        }
    }

    /// Append one document; returns the sequences it completed.
    pub fn push(&mut self, doc: &FimDocument) -> Result<Vec<PackedSequence>, FimError> {
        if doc.ids.last() != Some(&self.eos) {
            return Err(FimError::MissingEos(doc.doc_id.clone()));
        }
        let mut done = Vec::new();
        let mut rest = doc.ids.as_slice();
        while !rest.is_empty() {
            let room = self.context_length - self.current.len();
            let take = room.min(rest.len());
            let start = self.current.len();
            self.current.extend_from_slice(&rest[..take]);
            self.boundaries.push(SegmentBoundary {
                start,
                end: start + take,
                doc_id: doc.doc_id.clone(),
                was_fim: doc.was_fim,
            });
            rest = &rest[take..];
            if self.current.len() == self.context_length {
                done.push(self.flush(0));
            }
        }
        Ok(done)
    }

    fn flush(&mut self, padding: usize) -> PackedSequence {
        PackedSequence {
            ids: std::mem::replace(&mut self.current, Vec::with_capacity(self.context_length)),
            doc_boundaries: std::mem::take(&mut self.boundaries),
            padding,
        }
    }

    /// Pad the partial sequence, if any, with eos.
    pub fn finish(mut self) -> Option<PackedSequence> {
        if self.current.is_empty() {
            return None;
        }
        let padding = self.context_length - self.current.len();
        self.current.resize(self.context_length, self.eos);
        Some(self.flush(padding))
    }
}

pub fn pack_sequences<'a>(
    docs: impl IntoIterator<Item = &'a FimDocument>,
    cfg: &FimConfig,
    vocab: &BpeVocab,
) -> Result<Vec<PackedSequence>, FimError> {
    cfg.validate()?;
    let mut packer = SequencePacker::new(cfg.context_length, vocab.special_id(SpecialToken::Eos));
    let mut out = Vec::new();
    for doc in docs {
        out.extend(packer.push(doc)?);
    }
    out.extend(packer.finish());
    Ok(out)
}

/// Sidecar describing a directory of packed shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardIndex {
    pub context_length: usize,
    pub shard_count: usize,
    pub sequence_count: usize,
    pub sequences_per_shard: usize,
    pub boundaries_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryRecord<'a> {
    sequence: usize,
    #[serde(borrow)]
    segments: Vec<BoundaryRef<'a>>,
    padding: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryRef<'a> {
    start: usize,
    end: usize,
    doc_id: &'a str,
    was_fim: bool,
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.bin")
}

/// Write `shard-NNNNN.bin` files of little-endian u32 ids, `boundaries.jsonl`
/// and `index.json` into `dir`.
pub fn write_shards(
    dir: &Path,
    sequences: &[PackedSequence],
    context_length: usize,
    sequences_per_shard: usize,
) -> io::Result<ShardIndex> {
    fs::create_dir_all(dir)?;
    let per = sequences_per_shard.max(1);
    let chunks: Vec<&[PackedSequence]> = sequences.chunks(per).collect();
    for (i, chunk) in chunks.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(shard_file_name(i)))?);
        for seq in *chunk {
            for id in &seq.ids {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    let boundaries_file = "boundaries.jsonl".to_string();
    let mut w = BufWriter::new(File::create(dir.join(&boundaries_file))?);
    for (n, seq) in sequences.iter().enumerate() {
        let rec = BoundaryRecord {
            sequence: n,
            segments: seq
                .doc_boundaries
                .iter()
                .map(|b| BoundaryRef {
                    start: b.start,
                    end: b.end,
                    doc_id: &b.doc_id,
                    was_fim: b.was_fim,
                })
                .collect(),
            padding: seq.padding,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let index = ShardIndex {
        context_length,
        shard_count: chunks.len(),
        sequence_count: sequences.len(),
        sequences_per_shard: per,
        boundaries_file,
    };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(dir.join("index.json"), json)?;
    Ok(index)
}

pub fn read_shard(path: &Path) -> io::Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "shard length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One document offered to the mixer with its token count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixItem<T> {
    pub item: T,
    pub tokens: u64,
}

pub fn validate_ratios(ratios: &BTreeMap<CorpusCategory, f64>) -> Result<(), MixError> {
    if ratios.values().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(MixError::InvalidRatios("each ratio must lie in [0, 1]".into()));
    }
    let sum: f64 = ratios.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MixError::InvalidRatios(format!("ratios sum to {sum}, not 1")));
    }
    Ok(())
}

/// Interleave per-category streams so each category's cumulative token share
/// tracks its ratio. At every step the category with the largest deficit
/// `ratio * emitted_total - emitted_category` goes next; exact ties are broken
/// by `rng`.
///
/// With `target_tokens = Some(t)` the mix stops once `t` tokens are emitted and
/// a stream running dry first is a `category-underrun`. With `None` it stops
/// cleanly at the first exhausted stream.
pub fn mix_corpus<T, I, R>(
    streams: BTreeMap<CorpusCategory, I>,
    ratios: &BTreeMap<CorpusCategory, f64>,
    target_tokens: Option<u64>,
    rng: &mut R,
) -> Result<Vec<(CorpusCategory, MixItem<T>)>, MixError>
where
    I: IntoIterator<Item = MixItem<T>>,
    R: Rng + ?Sized,
{
    validate_ratios(ratios)?;
    let mut active: Vec<(CorpusCategory, f64, I::IntoIter, u64)> = Vec::new();
    let mut streams = streams;
    for (&cat, &ratio) in ratios {
        if ratio <= 0.0 {
            continue;
        }
        let stream = streams
            .remove(&cat)
            .ok_or(MixError::CategoryUnderrun(cat))?;
        active.push((cat, ratio, stream.into_iter(), 0));
    }
    let mut out = Vec::new();
    let mut total: u64 = 0;
    loop {
        if target_tokens.is_some_and(|t| total >= t) {
            break;
        }
        let deficits: Vec<f64> = active
            .iter()
            .map(|(_, ratio, _, emitted)| ratio * total as f64 - *emitted as f64)
            .collect();
        let best = deficits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..active.len()).filter(|&i| deficits[i] == best).collect();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.gen_range(0..tied.len())]
        };
        let (cat, _, stream, emitted) = &mut active[pick];
        match stream.next() {
            Some(item) => {
                *emitted += item.tokens;
                total += item.tokens;
                out.push((*cat, item));
            }
            None if target_tokens.is_some() => return Err(MixError::CategoryUnderrun(*cat)),
            None => break,
        }
    }
    Ok(out)
}
