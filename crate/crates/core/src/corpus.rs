//! Text ingestion: CSV loading, vocabulary, tokenization, stratified
//! splits, batching, the simplified EDA augmenter, and the synthetic
//! keyword dataset used by the acceptance runs.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, seed_tags, SynthCfg};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Padded to the requested length.
    pub ids: Vec<usize>,
    /// 1 for real tokens, a prefix.
    pub mask: Vec<u8>,
    pub true_len: usize,
}

impl TokenSequence {
    /// ids/mask trimmed to `len ≥ true_len` columns; batches shorten
    /// sequences to the longest member to keep attention cheap.
    pub fn trimmed(&self, len: usize) -> (&[usize], &[u8]) {
        let len = len.clamp(self.true_len.max(1), self.ids.len());
        (&self.ids[..len], &self.mask[..len])
    }
}

/// Lowercase words split on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

// ── vocabulary ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    /// Token at index i has id i + 2 (0 and 1 are pad/unk).
    tokens: Vec<String>,
    #[serde(skip)]
    map: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
        Vocabulary { tokens, map }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

impl Vocabulary {
    /// Frequency-ranked vocabulary (ties broken lexicographically), keeping
    /// the top `cap − 2` tokens beside pad and unk.
    pub fn build(examples: &[LabeledExample], cap: usize) -> Result<Vocabulary> {
        if cap < 3 {
            return Err(Error::Config(format!("vocabulary cap {} below 3", cap)));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for ex in examples {
            for w in split_words(&ex.text) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap - 2);
        Ok(Vocabulary::from(ranked.into_iter().map(|(t, _)| t).collect::<Vec<_>>()))
    }

    /// Total id count including pad and unk.
    pub fn len(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK)
    }

    /// Encode into exactly `len` ids. Empty text becomes a single unk so
    /// pooling never sees an all-masked sequence.
    pub fn encode(&self, text: &str, len: usize) -> TokenSequence {
        let mut ids: Vec<usize> = split_words(text)
            .iter()
            .take(len)
            .map(|w| self.id(w))
            .collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        let true_len = ids.len();
        let mut mask = vec![1u8; true_len];
        ids.resize(len, PAD);
        mask.resize(len, 0);
        TokenSequence { ids, mask, true_len }
    }
}

// ── CSV ─────────────────────────────────────────────────────────────────

/// Benchmark-style CSV: 1-based label column first, then `text_cols` text
/// fields joined by single spaces.
pub fn load_csv(path: &Path, text_cols: usize) -> Result<Vec<LabeledExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != text_cols + 1 {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} fields, found {}", text_cols + 1, record.len()),
            });
        }
        let raw_label: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Csv { line, msg: format!("bad label {:?}", &record[0]) })?;
        if raw_label < 1 {
            return Err(Error::Csv { line, msg: format!("label {} is not 1-based", raw_label) });
        }
        let text = (1..=text_cols)
            .map(|i| record[i].trim())
            .collect::<Vec<_>>()
            .join(" ");
        out.push(LabeledExample { text, label: (raw_label - 1) as usize });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {}", path.display(), e)))?;
    for ex in examples {
        writer
            .write_record([&(ex.label + 1).to_string(), &ex.text])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn class_count(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub classes: usize,
}

/// Stratified selection of `n` examples: per-class quotas of ⌊n/C⌋ or
/// ⌈n/C⌉, within-class choice by seeded shuffle. Returns (selected, rest).
pub fn stratified_split(
    examples: &[LabeledExample],
    n: usize,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if n > examples.len() {
        return Err(Error::Data(format!("asked for {} of {} examples", n, examples.len())));
    }
    let classes = class_count(examples);
    if classes == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::SPLIT));
    let base = n / classes;
    let mut extra: Vec<usize> = (0..classes).collect();
    extra.shuffle(&mut rng);
    let mut quota = vec![base; classes];
    for &c in extra.iter().take(n - base * classes) {
        quota[c] += 1;
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    let mut chosen = vec![false; examples.len()];
    for c in 0..classes {
        if by_class[c].len() < quota[c] {
            return Err(Error::Data(format!(
                "class {} has {} examples, quota {}",
                c,
                by_class[c].len(),
                quota[c]
            )));
        }
        by_class[c].shuffle(&mut rng);
        for &i in by_class[c].iter().take(quota[c]) {
            chosen[i] = true;
        }
    }
    let mut selected = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(examples.len() - n);
    for (i, ex) in examples.iter().enumerate() {
        if chosen[i] {
            selected.push(ex.clone());
        } else {
            rest.push(ex.clone());
        }
    }
    Ok((selected, rest))
}

pub fn stratified_sample(
    examples: &[LabeledExample],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    Ok(stratified_split(examples, n, seed)?.0)
}

// ── EDA ─────────────────────────────────────────────────────────────────

/// Simplified EDA: per-word deletion, insertion of copies of in-text
/// words, and random transpositions. Single-word texts pass through.
pub fn eda_augment(
    text: &str,
    rng: &mut ChaCha8Rng,
    p_insert: f64,
    p_delete: f64,
    p_swap: f64,
) -> String {
    let original = split_words(text);
    let n = original.len();
    if n <= 1 {
        return text.to_string();
    }
    let mut words: Vec<String> = Vec::with_capacity(n);
    for w in &original {
        if rng.random::<f64>() >= p_delete {
            words.push(w.clone());
        }
    }
    if words.is_empty() {
        words.push(original[rng.random_range(0..n)].clone());
    }
    let inserts = (p_insert * n as f64).ceil() as usize;
    for _ in 0..inserts {
        let w = original[rng.random_range(0..n)].clone();
        let at = rng.random_range(0..=words.len());
        words.insert(at, w);
    }
    let swaps = (p_swap * n as f64).ceil() as usize;
    if words.len() >= 2 {
        for _ in 0..swaps {
            let i = rng.random_range(0..words.len());
            let j = rng.random_range(0..words.len());
            words.swap(i, j);
        }
    }
    words.join(" ")
}

// ── batching ────────────────────────────────────────────────────────────

/// Seeded per-epoch shuffle of example indices, chunked into batches. The
/// short final batch is dropped when pair mixing is active.
pub fn epoch_batches(
    n_examples: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    drop_short: bool,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::BATCH ^ (epoch << 8)));
    idx.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(|c| c.to_vec()).collect();
    if drop_short {
        if let Some(last) = out.last() {
            if last.len() < batch {
                out.pop();
            }
        }
    }
    out
}

/// Encoded batch, trimmed to the longest true length among its members so
/// attention cost tracks content rather than the padding budget.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub ids: Vec<Vec<usize>>,
    pub masks: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

impl Minibatch {
    pub fn assemble(seqs: &[TokenSequence], labels: &[usize]) -> Minibatch {
        let width = seqs.iter().map(|s| s.true_len).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut masks = Vec::with_capacity(seqs.len());
        for s in seqs {
            let (i, m) = s.trimmed(width);
            ids.push(i.to_vec());
            masks.push(m.to_vec());
        }
        Minibatch { ids, masks, labels: labels.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ── synthetic dataset ───────────────────────────────────────────────────

/// Class-conditional keyword mixture: each token is one of the label's
/// keywords with probability q, otherwise a distractor word. Label noise
/// resamples a fraction of training labels uniformly.
pub fn synth_dataset(cfg: &SynthCfg, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::SYNTH));
    let gen_part = |n: usize, noise: f64, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..cfg.classes);
                let mut tokens = Vec::with_capacity(cfg.length);
                for _ in 0..cfg.length {
                    if rng.random::<f64>() < cfg.q {
                        let j = rng.random_range(0..cfg.keywords);
                        tokens.push(format!("k{}q{}", label, j));
                    } else {
                        let i = rng.random_range(0..cfg.vocab);
                        tokens.push(format!("w{}", i));
                    }
                }
                let observed = if noise > 0.0 && rng.random::<f64>() < noise {
                    rng.random_range(0..cfg.classes)
                } else {
                    label
                };
                LabeledExample { text: tokens.join(" "), label: observed }
            })
            .collect::<Vec<_>>()
    };
    let train = gen_part(cfg.train, cfg.label_noise, &mut rng);
    let val = gen_part(cfg.val, 0.0, &mut rng);
    let test = gen_part(cfg.test, 0.0, &mut rng);
    DatasetSplit { train, val, test, classes: cfg.classes }
}

// ── dataset assembly ────────────────────────────────────────────────────

/// Materialize the configured dataset: generate or load, carve the
/// validation split, subsample, and optionally append one EDA-augmented
/// copy of every training example.
pub fn prepare(cfg: &crate::config::Config, seed: u64) -> Result<DatasetSplit> {
    let mut split = match cfg.data.source.as_str() {
        "synth" => synth_dataset(&cfg.synth, seed),
        "csv" => {
            let train_all = load_csv(Path::new(&cfg.data.train), cfg.data.text_cols)?;
            let test = load_csv(Path::new(&cfg.data.test), cfg.data.text_cols)?;
            if train_all.is_empty() {
                return Err(Error::Data("training file has no rows".into()));
            }
            let classes = class_count(&train_all).max(class_count(&test));
            let (val, train) = stratified_split(&train_all, cfg.data.val_n, seed)?;
            DatasetSplit { train, val, test, classes }
        }
        other => return Err(Error::Config(format!("unknown data source {:?}", other))),
    };
    if cfg.data.train_n > 0 && cfg.data.train_n < split.train.len() {
        split.train = stratified_sample(&split.train, cfg.data.train_n, seed)?;
    }
    if cfg.data.eda {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::EDA));
        let mut augmented = Vec::with_capacity(split.train.len());
        for ex in &split.train {
            let text = eda_augment(
                &ex.text,
                &mut rng,
                cfg.data.eda_p_insert,
                cfg.data.eda_p_delete,
                cfg.data.eda_p_swap,
            );
            augmented.push(LabeledExample { text, label: ex.label });
        }
        split.train.extend(augmented);
    }
    Ok(split)
}
