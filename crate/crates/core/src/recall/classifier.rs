//! Supervised fastText-style classifier: the hidden vector is the mean of the
//! embedding rows of a document's hashed n-gram features, followed by a linear
//! layer and a two-way softmax (class 0 = relevant, class 1 = irrelevant).
//!
//! The embedding table is logically `feature_buckets x embed_dim`. Rows are
//! materialized on first update; untouched rows are regenerated on demand from
//! `(seed, bucket)`, so scoring never depends on which rows happen to be stored.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use super::{RecallConfig, RecallError};

pub const RELEVANT: usize = 0;
pub const IRRELEVANT: usize = 1;

/// Feature multiset as sorted `(bucket, count)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBag {
    counts: Vec<(u32, u32)>,
    total: u32,
}

impl FeatureBag {
    pub fn from_indices(indices: &[u32]) -> Self {
        let mut map: BTreeMap<u32, u32> = BTreeMap::new();
        for &i in indices {
            *map.entry(i).or_insert(0) += 1;
        }
        FeatureBag {
            total: indices.len() as u32,
            counts: map.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    /// The same multiset with every count multiplied by `k`.
    pub fn repeated(&self, k: u32) -> Self {
        FeatureBag {
            counts: self.counts.iter().map(|&(b, c)| (b, c * k)).collect(),
            total: self.total * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureBag,
    pub relevant: bool,
}

impl LabeledExample {
    fn target(&self) -> usize {
        if self.relevant {
            RELEVANT
        } else {
            IRRELEVANT
        }
    }
}

/// Gradients of the mean cross-entropy over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `embed_dim x 2`, row-major.
    pub output_weights: Vec<f64>,
    pub bias: [f64; 2],
    pub embeddings: BTreeMap<u32, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RecallClassifier {
    embed_dim: usize,
    feature_buckets: u32,
    init_scale: f64,
    seed: u64,
    embeddings: HashMap<u32, Vec<f64>>,
    output_weights: Vec<f64>,
    bias: [f64; 2],
}

impl RecallClassifier {
    /// Fresh model: embeddings uniform in `[-init_scale, init_scale)`, output
    /// layer and bias zero.
    pub fn new(cfg: &RecallConfig) -> Self {
        RecallClassifier {
            embed_dim: cfg.embed_dim,
            feature_buckets: cfg.feature_buckets,
            init_scale: cfg.init_scale,
            seed: cfg.seed,
            embeddings: HashMap::new(),
            output_weights: vec![0.0; cfg.embed_dim * 2],
            bias: [0.0; 2],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_buckets(&self) -> u32 {
        self.feature_buckets
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output_weights
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        &mut self.output_weights
    }

    pub fn bias(&self) -> [f64; 2] {
        self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64; 2] {
        &mut self.bias
    }

    fn initial_row(&self, bucket: u32) -> Vec<f64> {
        let row_seed = xxh3_64_with_seed(&bucket.to_le_bytes(), self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
        (0..self.embed_dim)
            .map(|_| rng.gen_range(-self.init_scale..self.init_scale))
            .collect()
    }

    /// Current value of one embedding row.
    pub fn embedding_row(&self, bucket: u32) -> Vec<f64> {
        match self.embeddings.get(&bucket) {
            Some(row) => row.clone(),
            None => self.initial_row(bucket),
        }
    }

    pub fn embedding_row_mut(&mut self, bucket: u32) -> &mut Vec<f64> {
        if !self.embeddings.contains_key(&bucket) {
            let row = self.initial_row(bucket);
            self.embeddings.insert(bucket, row);
        }
        self.embeddings.get_mut(&bucket).expect("row just inserted")
    }

    pub fn is_finite(&self) -> bool {
        self.output_weights.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
            && self.embeddings.values().flatten().all(|v| v.is_finite())
    }

    fn hidden(&self, bag: &FeatureBag) -> Vec<f64> {
        let mut h = vec![0.0; self.embed_dim];
        if bag.is_empty() {
            return h;
        }
        for &(bucket, count) in bag.counts() {
            let row = self.embeddings.get(&bucket);
            let owned;
            let row = match row {
                Some(r) => r,
                None => {
                    owned = self.initial_row(bucket);
                    &owned
                }
            };
            let c = f64::from(count);
            for (acc, v) in h.iter_mut().zip(row) {
                *acc += c * v;
            }
        }
        let n = f64::from(bag.total());
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    fn logits(&self, h: &[f64]) -> [f64; 2] {
        let mut z = self.bias;
        for (d, hv) in h.iter().enumerate() {
            z[0] += hv * self.output_weights[d * 2];
            z[1] += hv * self.output_weights[d * 2 + 1];
        }
        z
    }

    /// Class probabilities `[relevant, irrelevant]`.
    pub fn predict(&self, bag: &FeatureBag) -> [f64; 2] {
        softmax(self.logits(&self.hidden(bag)))
    }

    pub fn prob_relevant(&self, bag: &FeatureBag) -> f64 {
        self.predict(bag)[RELEVANT]
    }

    /// Cross-entropy of one example and the gradient pieces needed to update it.
    fn example_grad(&self, ex: &LabeledExample) -> (f64, Vec<f64>, [f64; 2], Vec<f64>) {
        let h = self.hidden(&ex.features);
        let p = softmax(self.logits(&h));
        let y = ex.target();
        let loss = -p[y].max(f64::MIN_POSITIVE).ln();
        let mut g = p;
        g[y] -= 1.0;
        let mut dw = vec![0.0; self.embed_dim * 2];
        let mut dh = vec![0.0; self.embed_dim];
        for d in 0..self.embed_dim {
            dw[d * 2] = h[d] * g[0];
            dw[d * 2 + 1] = h[d] * g[1];
            dh[d] = self.output_weights[d * 2] * g[0] + self.output_weights[d * 2 + 1] * g[1];
        }
        (loss, dw, g, dh)
    }

    /// Mean loss and analytic gradients over `batch`.
    pub fn loss_and_grad(&self, batch: &[LabeledExample]) -> (f64, Gradients) {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut grads = Gradients {
            output_weights: vec![0.0; self.embed_dim * 2],
            bias: [0.0; 2],
            embeddings: BTreeMap::new(),
        };
        let mut total = 0.0;
        for ex in batch {
            let (loss, dw, db, dh) = self.example_grad(ex);
            total += loss;
            for (acc, v) in grads.output_weights.iter_mut().zip(&dw) {
                *acc += v * scale;
            }
            grads.bias[0] += db[0] * scale;
            grads.bias[1] += db[1] * scale;
            if ex.features.is_empty() {
                continue;
            }
            let n = f64::from(ex.features.total());
            for &(bucket, count) in ex.features.counts() {
                let row = grads
                    .embeddings
                    .entry(bucket)
                    .or_insert_with(|| vec![0.0; self.embed_dim]);
                let c = f64::from(count) / n * scale;
                for (acc, v) in row.iter_mut().zip(&dh) {
                    *acc += c * v;
                }
            }
        }
        (total * scale, grads)
    }

    /// Mean cross-entropy over `batch` without gradients.
    pub fn loss(&self, batch: &[LabeledExample]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|ex| -self.predict(&ex.features)[ex.target()].max(f64::MIN_POSITIVE).ln())
            .sum();
        total / batch.len().max(1) as f64
    }

    /// One SGD step on a single example; returns its loss before the update.
    fn sgd_step(&mut self, ex: &LabeledExample, lr: f64) -> f64 {
        let (loss, dw, db, dh) = self.example_grad(ex);
        for (w, g) in self.output_weights.iter_mut().zip(&dw) {
            *w -= lr * g;
        }
        self.bias[0] -= lr * db[0];
        self.bias[1] -= lr * db[1];
        if !ex.features.is_empty() {
            let n = f64::from(ex.features.total());
            for &(bucket, count) in ex.features.counts() {
                let c = lr * f64::from(count) / n;
                let row = self.embedding_row_mut(bucket);
                for (e, g) in row.iter_mut().zip(&dh) {
                    *e -= c * g;
                }
            }
        }
        loss
    }
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    /// Mean training loss over the final epoch.
    pub final_loss: f64,
    pub steps: usize,
}

/// SGD over `examples` for `cfg.epochs` passes with a learning rate decayed
/// linearly from `cfg.learning_rate` to zero. Each epoch visits the examples in
/// a seeded shuffle.
pub fn train_classifier(
    examples: &[LabeledExample],
    cfg: &RecallConfig,
) -> Result<(RecallClassifier, TrainSummary), RecallError> {
    let positives = examples.iter().filter(|e| e.relevant).count();
    if positives == 0 || positives == examples.len() {
        return Err(RecallError::DegenerateLabels);
    }
    let mut model = RecallClassifier::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e6b_5f73_6764);
    let total_steps = (cfg.epochs * examples.len()).max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    let mut final_loss = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            epoch_loss += model.sgd_step(&examples[i], lr);
            step += 1;
        }
        final_loss = epoch_loss / examples.len() as f64;
    }
    Ok((
        model,
        TrainSummary {
            final_loss,
            steps: step,
        },
    ))
}
