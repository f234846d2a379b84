//! Documents, the JSONL corpus format, tokenization, and the seeded
//! synthetic corpus generator with planted duplicate spans.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tokenizer::{Vocab, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Web,
    Wiki,
    Code,
    Books,
    News,
    Synthetic,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Web,
        Category::Wiki,
        Category::Code,
        Category::Books,
        Category::News,
        Category::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Web => "web",
            Category::Wiki => "wiki",
            Category::Code => "code",
            Category::Books => "books",
            Category::News => "news",
            Category::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Format {
                kind: "corpus",
                msg: format!("unknown category `{s}`"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One line of the JSONL corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u32,
    pub text: String,
    pub split: Split,
    pub category: Category,
}

/// A tokenized document: `BOS` followed by the BPE encoding of its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub doc_id: u32,
    pub category: Category,
    pub split: Split,
    pub vocab_hash: u64,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).at(path)?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Format {
            kind: "corpus",
            msg: format!("line {}: {e}", n + 1),
        })?;
        docs.push(doc);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = docs.iter().find(|d| !seen.insert(d.id)) {
        return Err(Error::Format {
            kind: "corpus",
            msg: format!("duplicate document id {}", dup.id),
        });
    }
    Ok(docs)
}

pub fn to_jsonl(docs: &[Document]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    crate::io_util::write_atomic(path, &to_jsonl(docs)?)
}

pub fn tokenize(doc: &Document, vocab: &Vocab) -> TokenSequence {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&doc.text));
    TokenSequence {
        tokens,
        doc_id: doc.id,
        category: doc.category,
        split: doc.split,
        vocab_hash: vocab.hash(),
    }
}

pub fn tokenize_all(docs: &[Document], vocab: &Vocab) -> Vec<TokenSequence> {
    use rayon::prelude::*;
    docs.par_iter().map(|d| tokenize(d, vocab)).collect()
}

pub fn split_of(seqs: &[TokenSequence], split: Split) -> Vec<TokenSequence> {
    seqs.iter().filter(|s| s.split == split).cloned().collect()
}

/// Synthetic corpus parameters. Text comes from a per-category first-order
/// Markov chain over made-up words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_docs: usize,
    /// Words per document.
    pub doc_len: usize,
    /// Distinct word types.
    pub word_vocab: usize,
    /// Successors per word in each category's chain.
    pub branching: usize,
    /// Probability that a validation document receives a planted verbatim
    /// span.
    pub duplication_rate: f64,
    /// Same, for training documents not reserved as copy sources.
    pub train_duplication_rate: f64,
    pub validation_fraction: f64,
    pub span_min_words: usize,
    pub span_max_words: usize,
    /// Latest word offset at which a planted span may start.
    pub plant_window: usize,
    /// Validation documents are redrawn until none of their windows of this
    /// many words occurs in a training document (0 disables).
    pub fresh_window: usize,
    /// Copy the source's opening words to the start of the target, so the
    /// two documents share chunk boundaries over the planted span.
    pub aligned_spans: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_docs: 2222,
            doc_len: 40,
            word_vocab: 800,
            branching: 8,
            duplication_rate: 0.5,
            train_duplication_rate: 1.0,
            validation_fraction: 0.1,
            span_min_words: 16,
            span_max_words: 24,
            plant_window: 4,
            fresh_window: 8,
            aligned_spans: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.duplication_rate)
            || !(0.0..=1.0).contains(&self.train_duplication_rate)
        {
            return bad("duplication rates must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.n_docs < 2 || self.doc_len == 0 || self.word_vocab < 2 || self.branching == 0 {
            return bad("synthetic corpus needs n_docs >= 2, doc_len >= 1, word_vocab >= 2, branching >= 1");
        }
        if self.span_min_words == 0
            || self.span_min_words > self.span_max_words
            || self.span_max_words > self.doc_len
        {
            return bad("span lengths must satisfy 1 <= min <= max <= doc_len");
        }
        Ok(())
    }

    fn is_validation(&self, i: usize) -> bool {
        let f = self.validation_fraction;
        ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
    }
}

const SYNTH_CATEGORIES: [Category; 5] = [
    Category::Web,
    Category::Wiki,
    Category::Code,
    Category::Books,
    Category::News,
];

fn make_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
        "br", "ch", "dr", "gl", "kr", "pl", "sh", "st", "th", "tr",
    ];
    const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.random_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(NUCLEI.choose(rng).unwrap());
        }
        if rng.random_bool(0.3) {
            w.push_str(ONSETS[..18].choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct MarkovChain {
    successors: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
}

impl MarkovChain {
    fn new(rng: &mut ChaCha8Rng, words: usize, branching: usize) -> Self {
        let successors = (0..words)
            .map(|_| (0..branching).map(|_| rng.random_range(0..words)).collect())
            .collect();
        let mut cumulative = Vec::with_capacity(branching);
        let mut acc = 0.0;
        for r in 0..branching {
            acc += 1.0 / (r + 1) as f64;
            cumulative.push(acc);
        }
        Self {
            successors,
            cumulative,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let mut w = rng.random_range(0..self.successors.len());
        let mut out = Vec::with_capacity(len);
        let total = *self.cumulative.last().unwrap();
        for _ in 0..len {
            out.push(w);
            let u = rng.random_range(0.0..total);
            let r = self.cumulative.partition_point(|&c| c <= u);
            w = self.successors[w][r.min(self.successors[w].len() - 1)];
        }
        out
    }
}

/// Generates the synthetic corpus. Documents are split by a fixed stride,
/// get categories round-robin, and receive a verbatim span copied from a
/// reserved, never-planted training document: validation documents with
/// probability `duplication_rate`, the remaining training documents with
/// `train_duplication_rate` so the model sees copyable neighbors while
/// training.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = make_words(&mut rng, spec.word_vocab);
    let chains: Vec<MarkovChain> = SYNTH_CATEGORIES
        .iter()
        .map(|_| MarkovChain::new(&mut rng, spec.word_vocab, spec.branching))
        .collect();

    let mut bodies: Vec<Vec<usize>> = (0..spec.n_docs)
        .map(|i| chains[i % chains.len()].sample(&mut rng, spec.doc_len))
        .collect();
    let splits: Vec<Split> = (0..spec.n_docs)
        .map(|i| {
            if spec.is_validation(i) {
                Split::Validation
            } else {
                Split::Train
            }
        })
        .collect();
    // Every other training document is reserved as a copy source and never
    // planted, so a planted span always survives verbatim in the training set.
    let mut train_seen = 0usize;
    let is_source: Vec<bool> = splits
        .iter()
        .map(|&s| {
            let src = s == Split::Train && train_seen.is_multiple_of(2);
            train_seen += (s == Split::Train) as usize;
            src
        })
        .collect();
    let planted: Vec<bool> = (0..spec.n_docs)
        .map(|i| {
            let rate = match splits[i] {
                Split::Validation => spec.duplication_rate,
                Split::Train => spec.train_duplication_rate,
            };
            rng.random_bool(rate) && !is_source[i]
        })
        .collect();
    let sources: Vec<usize> = (0..spec.n_docs).filter(|&i| is_source[i]).collect();
    if planted.iter().any(|&p| p) && sources.is_empty() {
        return Err(Error::Config("no training document to copy spans from".into()));
    }
    let plant = |i: usize, bodies: &mut [Vec<usize>], rng: &mut ChaCha8Rng| {
        let src = *sources.choose(rng).unwrap();
        let len = rng.random_range(spec.span_min_words..=spec.span_max_words);
        let (from, to) = if spec.aligned_spans {
            (0, 0)
        } else {
            (
                rng.random_range(0..=spec.doc_len - len),
                rng.random_range(0..=spec.plant_window.min(spec.doc_len - len)),
            )
        };
        let span = bodies[src][from..from + len].to_vec();
        bodies[i][to..to + len].copy_from_slice(&span);
    };
    for i in 0..spec.n_docs {
        if planted[i] && splits[i] == Split::Train {
            plant(i, &mut bodies, &mut rng);
        }
    }
    // Redraw validation text that repeats training text by chance, so any
    // long verbatim overlap comes from planting alone.
    let w = spec.fresh_window;
    if w > 0 {
        let seen: HashSet<&[usize]> = (0..spec.n_docs)
            .filter(|&i| splits[i] == Split::Train)
            .flat_map(|i| bodies[i].windows(w))
            .collect();
        let mut fresh = Vec::new();
        for i in (0..spec.n_docs).filter(|&i| splits[i] == Split::Validation) {
            let mut body = bodies[i].clone();
            let mut tries = 0;
            while body.windows(w).any(|x| seen.contains(x)) {
                tries += 1;
                if tries > 1000 {
                    return Err(Error::Config(format!(
                        "cannot draw validation text free of {w}-word training windows"
                    )));
                }
                body = chains[i % chains.len()].sample(&mut rng, spec.doc_len);
            }
            fresh.push((i, body));
        }
        for (i, body) in fresh {
            bodies[i] = body;
        }
    }
    for i in 0..spec.n_docs {
        if planted[i] && splits[i] == Split::Validation {
            plant(i, &mut bodies, &mut rng);
        }
    }

    Ok(bodies
        .into_iter()
        .enumerate()
        .map(|(i, body)| Document {
            id: i as u32,
            text: body
                .iter()
                .map(|&w| words[w].as_str())
                .collect::<Vec<_>>()
                .join(" "),
            split: splits[i],
            category: SYNTH_CATEGORIES[i % SYNTH_CATEGORIES.len()],
        })
        .collect())
}
