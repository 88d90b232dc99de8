#![allow(dead_code)]

use codecorpus::corpus::{Origin, SourceDocument};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MATH_WORDS: &[&str] = &[
    "integral", "derivative", "theorem", "lemma", "proof", "matrix", "eigenvalue", "vector",
    "polynomial", "topology", "manifold", "algebra", "homomorphism", "prime", "modulo",
    "convergence", "series", "limit", "tensor", "gradient", "lattice", "group", "ring",
    "field", "kernel", "basis", "determinant", "inequality", "corollary", "axiom",
];

pub const OTHER_WORDS: &[&str] = &[
    "recipe", "garden", "football", "travel", "holiday", "fashion", "celebrity", "weather",
    "movie", "concert", "restaurant", "hotel", "beach", "shopping", "wedding", "puppy",
    "kitten", "festival", "vacation", "painting", "novel", "guitar", "coffee", "chocolate",
    "soccer", "marathon", "skincare", "furniture", "camping", "bakery",
];

pub const SHARED_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "that", "for", "it", "with", "as", "on", "this",
    "by", "we", "can", "from", "about", "more", "new", "page", "read", "today", "see",
];

pub fn sentence(rng: &mut ChaCha8Rng, topical: &[&str], len: usize, topical_share: f64) -> String {
    (0..len)
        .map(|_| {
            if rng.gen_bool(topical_share) {
                *topical.choose(rng).unwrap()
            } else {
                *SHARED_WORDS.choose(rng).unwrap()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Twenty documents, ten per class, drawn from disjoint vocabularies.
pub fn separable_toy(seed: u64) -> Vec<(String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20)
        .map(|i| {
            let relevant = i % 2 == 0;
            let words = if relevant { MATH_WORDS } else { OTHER_WORDS };
            let len = rng.gen_range(8..16);
            (sentence(&mut rng, words, len, 1.0), relevant)
        })
        .collect()
}

pub struct PlantedCorpus {
    pub pages: Vec<SourceDocument>,
    pub relevant: Vec<bool>,
    pub seed: Vec<SourceDocument>,
    pub patterns: String,
}

/// 500 web pages over 25 domains of 20 pages. 50 are relevant: 8 in each of
/// five topical domains, the rest scattered one per domain. Relevant pages live
/// under `/q/`, the others under `/blog/`. The seed is 20 relevant pages.
pub fn planted_corpus(seed: u64) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pages = Vec::new();
    let mut relevant = Vec::new();
    for d in 0..25 {
        let topical = d < 5;
        let domain = if topical {
            format!("mathsite{d}.org")
        } else {
            format!("site{d}.com")
        };
        let planted: usize = if topical { 8 } else if d < 15 { 1 } else { 0 };
        for p in 0..20 {
            let is_rel = p < planted;
            let len = rng.gen_range(30..80);
            let text = if is_rel {
                sentence(&mut rng, MATH_WORDS, len, 0.5)
            } else {
                sentence(&mut rng, OTHER_WORDS, len, 0.5)
            };
            let path = if is_rel { "q" } else { "blog" };
            let url = format!("https://{domain}/{path}/{p}");
            pages.push(
                SourceDocument::new(format!("{domain}-{p}"), text, Origin::Web)
                    .with_url(url)
                    .with_domain(domain.clone()),
            );
            relevant.push(is_rel);
        }
    }
    let mut order: Vec<usize> = (0..pages.len()).collect();
    order.shuffle(&mut rng);
    let pages: Vec<SourceDocument> = order.iter().map(|&i| pages[i].clone()).collect();
    let relevant: Vec<bool> = order.iter().map(|&i| relevant[i]).collect();
    let seed_docs = pages
        .iter()
        .zip(&relevant)
        .filter(|(_, r)| **r)
        .take(20)
        .map(|(p, _)| p.clone())
        .collect();
    PlantedCorpus {
        pages,
        relevant,
        seed: seed_docs,
        patterns: "/q/\n".to_string(),
    }
}

/// Precision and recall of `collected` against the planted labels.
pub fn precision_recall(corpus: &PlantedCorpus, collected: &[String]) -> (f64, f64) {
    let truth: std::collections::BTreeSet<&str> = corpus
        .pages
        .iter()
        .zip(&corpus.relevant)
        .filter(|(_, r)| **r)
        .map(|(p, _)| p.id.as_str())
        .collect();
    let hits = collected.iter().filter(|id| truth.contains(id.as_str())).count();
    let precision = if collected.is_empty() {
        0.0
    } else {
        hits as f64 / collected.len() as f64
    };
    (precision, hits as f64 / truth.len() as f64)
}

use codecorpus::recall::{LabeledExample, RecallClassifier};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and central finite
/// differences over the output weights, the bias and every embedding row the
/// batch touches.
pub fn gradient_check(model: &RecallClassifier, batch: &[LabeledExample]) -> f64 {
    const EPS: f64 = 1e-5;
    let (_, grads) = model.loss_and_grad(batch);
    let mut worst: f64 = 0.0;

    for k in 0..model.output_weights().len() {
        let mut plus = model.clone();
        plus.output_weights_mut()[k] += EPS;
        let mut minus = model.clone();
        minus.output_weights_mut()[k] -= EPS;
        let numeric = (plus.loss(batch) - minus.loss(batch)) / (2.0 * EPS);
        worst = worst.max(rel_err(grads.output_weights[k], numeric));
    }
    for k in 0..2 {
        let mut plus = model.clone();
        plus.bias_mut()[k] += EPS;
        let mut minus = model.clone();
        minus.bias_mut()[k] -= EPS;
        let numeric = (plus.loss(batch) - minus.loss(batch)) / (2.0 * EPS);
        worst = worst.max(rel_err(grads.bias[k], numeric));
    }
    for (&bucket, row) in &grads.embeddings {
        for (d, &analytic) in row.iter().enumerate() {
            let mut plus = model.clone();
            plus.embedding_row_mut(bucket)[d] += EPS;
            let mut minus = model.clone();
            minus.embedding_row_mut(bucket)[d] -= EPS;
            let numeric = (plus.loss(batch) - minus.loss(batch)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// A model with random output weights and bias, so every gradient is non-trivial.
pub fn randomized_model(cfg: &codecorpus::recall::RecallConfig, seed: u64) -> RecallClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RecallClassifier::new(cfg);
    for w in model.output_weights_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    *model.bias_mut() = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    model
}

/// Small batch of random feature bags with mixed labels.
pub fn random_batch(rng: &mut ChaCha8Rng, buckets: u32, size: usize) -> Vec<LabeledExample> {
    (0..size)
        .map(|i| {
            let n = rng.gen_range(1..12);
            let idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..buckets)).collect();
            LabeledExample {
                features: codecorpus::recall::FeatureBag::from_indices(&idx),
                relevant: i % 2 == 0 || rng.gen_bool(0.3),
            }
        })
        .collect()
}

pub const CODE_WORDS: &[&str] = &[
    "def", "return", "import", "class", "self", "lambda", "yield", "async", "await", "struct",
    "impl", "fn", "let", "mut", "const", "unsafe", "trait", "enum", "match", "println",
    "compile", "debugger", "segfault", "stacktrace", "refactor", "variable", "function",
    "pointer", "iterator", "closure",
];

fn code_file(rng: &mut ChaCha8Rng, i: usize) -> String {
    let mut s = String::new();
    for f in 0..rng.gen_range(2..6) {
        s.push_str(&format!("def func_{i}_{f}(x, y):\n"));
        for _ in 0..rng.gen_range(2..6) {
            let a = CODE_WORDS.choose(rng).unwrap();
            let b = SHARED_WORDS.choose(rng).unwrap();
            s.push_str(&format!("    value = {a}_{b}(x) + y * {}\n", rng.gen_range(0..100)));
        }
        s.push_str("    return value\n\n");
    }
    s
}

fn jsonl_line(v: serde_json::Value) -> String {
    let mut s = serde_json::to_string(&v).unwrap();
    s.push('\n');
    s
}

/// Write a pipeline fixture of roughly `n` documents into `dir` and return the
/// config path. GitHub files include rule violations and duplicates; web pages
/// span code, math and unrelated domains.
pub fn write_pipeline_fixture(dir: &std::path::Path, n: usize, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_github = n * 2 / 5;
    let n_web = n * 2 / 5;
    let n_nl = n - n_github - n_web;

    let mut github = String::new();
    let mut previous: Vec<String> = Vec::new();
    for i in 0..n_github {
        let content = match i % 20 {
            // exact duplicate of an earlier file
            0 if !previous.is_empty() => previous[rng.gen_range(0..previous.len())].clone(),
            1 => format!("x = '{}'\n", "a".repeat(1200)),
            2 => format!("<?xml version=\"1.0\"?>\n<root>{}</root>\n", code_file(&mut rng, i)),
            3 => "0 1 2 3 4 5 6 7 8 9 ; ; ; ; ;\n".repeat(10),
            _ => code_file(&mut rng, i),
        };
        previous.push(content.clone());
        let language = if i % 20 == 2 { "xml" } else { "python" };
        github.push_str(&jsonl_line(serde_json::json!({
            "id": format!("gh-{i}"),
            "content": content,
            "language": language,
            "url": format!("https://github.com/org{}/repo/blob/main/f{i}.py", i % 7),
        })));
    }

    let mut web = String::new();
    for i in 0..n_web {
        let d = i % 30;
        let (words, domain, path) = match d {
            0..=5 => (CODE_WORDS, format!("codesite{d}.dev"), if i % 3 == 0 { "blog" } else { "q" }),
            6..=9 => (MATH_WORDS, format!("mathsite{d}.org"), if i % 3 == 0 { "blog" } else { "q" }),
            _ => (OTHER_WORDS, format!("site{d}.com"), "blog"),
        };
        let len = rng.gen_range(30..90);
        web.push_str(&jsonl_line(serde_json::json!({
            "id": format!("web-{i}"),
            "content": sentence(&mut rng, words, len, 0.5),
            "url": format!("https://{domain}/{path}/{i}"),
        })));
    }

    let mut nl = String::new();
    for i in 0..n_nl {
        let len = rng.gen_range(40..120);
        nl.push_str(&jsonl_line(serde_json::json!({
            "id": format!("nl-{i}"),
            "content": sentence(&mut rng, OTHER_WORDS, len, 0.3),
            "url": format!("https://news{}.example/article/{i}", i % 11),
        })));
    }

    let mut seeds = |words: &[&str], tag: &str| {
        let mut out = String::new();
        for i in 0..20 {
            let len = rng.gen_range(30..90);
            out.push_str(&jsonl_line(serde_json::json!({
                "id": format!("{tag}-seed-{i}"),
                "content": sentence(&mut rng, words, len, 0.5),
                "url": format!("https://seeds.example/{tag}/{i}"),
            })));
        }
        out
    };
    let code_seed = seeds(CODE_WORDS, "code");
    let math_seed = seeds(MATH_WORDS, "math");

    let write = |name: &str, body: &str| std::fs::write(dir.join(name), body).unwrap();
    write("github.jsonl", &github);
    write("web.jsonl", &web);
    write("nl.jsonl", &nl);
    write("code_seed.jsonl", &code_seed);
    write("math_seed.jsonl", &math_seed);
    write("patterns.txt", "# question pages\n/q/\n");
    let config = format!(
        r#"seed = {seed}

[inputs]
github = "github.jsonl"
web = "web.jsonl"
natural_language = "nl.jsonl"
code_seed = "code_seed.jsonl"
math_seed = "math_seed.jsonl"
url_patterns = "patterns.txt"

[tokenizer]
vocab_size = 512
train_docs = 300

[pack]
context_length = 512
sequences_per_shard = 64
"#
    );
    write("pipeline.toml", &config);
    dir.join("pipeline.toml")
}
