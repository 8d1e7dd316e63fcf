//! Parallel corpora, vocabularies, batching and synthetic tasks.

use std::collections::HashMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_MIN_FREQ: usize = 2;

/// Token ↔ id map with the four reserved ids in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Keeps tokens seen at least `min_freq` times, most frequent first
    /// (ties alphabetical).
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>, min_freq: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary of `n` symbols named `w0 … w{n-1}`.
    pub fn synthetic(n: usize) -> Self {
        Self::from_tokens((0..n).map(|i| format!("w{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Non-reserved tokens, one per line; line `i` holds id `i + 4`.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if let Some(t) = words.iter().find(|w| w.is_empty() || RESERVED.contains(&w.as_str())) {
            return Err(Error::Format(format!("invalid vocabulary entry {t:?}")));
        }
        Ok(Self::from_tokens(words))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_lines(&fs::read_to_string(path)?)
    }
}

/// Whitespace tokenisation with lowercasing.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Tokenises line pairs and builds both vocabularies from them.
    pub fn from_lines(src: &[&str], tgt: &[&str], min_freq: usize) -> Result<Self> {
        let (s, t) = tokenize_pairs(src, tgt)?;
        let src_vocab = Vocab::build(s.iter().map(Vec::as_slice), min_freq);
        let tgt_vocab = Vocab::build(t.iter().map(Vec::as_slice), min_freq);
        Ok(Self::encode(&s, &t, src_vocab, tgt_vocab))
    }

    /// Tokenises line pairs against existing vocabularies (validation/test splits).
    pub fn from_lines_with_vocab(
        src: &[&str],
        tgt: &[&str],
        src_vocab: Vocab,
        tgt_vocab: Vocab,
    ) -> Result<Self> {
        let (s, t) = tokenize_pairs(src, tgt)?;
        Ok(Self::encode(&s, &t, src_vocab, tgt_vocab))
    }

    fn encode(s: &[Vec<String>], t: &[Vec<String>], src_vocab: Vocab, tgt_vocab: Vocab) -> Self {
        let pairs = s
            .iter()
            .zip(t)
            .map(|(a, b)| (src_vocab.encode(a), tgt_vocab.encode(b)))
            .collect();
        Self {
            pairs,
            src_vocab,
            tgt_vocab,
        }
    }

    /// Total target tokens after truncation to `max_len`.
    pub fn target_tokens(&self, max_len: usize) -> usize {
        self.pairs.iter().map(|(_, t)| t.len().min(max_len)).sum()
    }
}

fn tokenize_pairs(src: &[&str], tgt: &[&str]) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Format("corpus is empty".into()));
    }
    if src.len() != tgt.len() {
        return Err(Error::Format(format!(
            "line count mismatch: {} source lines, {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let mut s = Vec::with_capacity(src.len());
    let mut t = Vec::with_capacity(tgt.len());
    for (i, (a, b)) in src.iter().zip(tgt).enumerate() {
        let (ta, tb) = (tokenize(a), tokenize(b));
        if ta.is_empty() || tb.is_empty() {
            return Err(Error::Format(format!("line {} has an empty side", i + 1)));
        }
        s.push(ta);
        t.push(tb);
    }
    Ok((s, t))
}

fn read_lines(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Format(format!("{} is empty", path.display())));
    }
    Ok(text)
}

/// Splits a two-column TSV into source and target lines.
pub fn split_tsv(text: &str) -> Result<(Vec<&str>, Vec<&str>)> {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => {
                src.push(a);
                tgt.push(b);
            }
            _ => {
                return Err(Error::Format(format!(
                    "line {} does not have exactly two tab-separated columns",
                    i + 1
                )))
            }
        }
    }
    Ok((src, tgt))
}

/// Loads sentence-aligned source and target files, one sentence per line.
pub fn load_parallel_corpus(src_path: &Path, tgt_path: &Path, min_freq: usize) -> Result<ParallelCorpus> {
    let (s, t) = (read_lines(src_path)?, read_lines(tgt_path)?);
    let src: Vec<&str> = s.lines().collect();
    let tgt: Vec<&str> = t.lines().collect();
    ParallelCorpus::from_lines(&src, &tgt, min_freq)
}

/// Loads a two-column TSV corpus.
pub fn load_tsv_corpus(path: &Path, min_freq: usize) -> Result<ParallelCorpus> {
    let text = read_lines(path)?;
    let (src, tgt) = split_tsv(&text)?;
    ParallelCorpus::from_lines(&src, &tgt, min_freq)
}

/// One padded mini-batch. Id matrices are row-major `(batch, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    /// BOS followed by the target tokens.
    pub tgt_in: Vec<u32>,
    /// Target tokens followed by EOS.
    pub tgt_out: Vec<u32>,
    /// Corpus indices of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&[u32], &[u32])], indices: Vec<usize>, max_len: usize) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len().min(max_len)).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|(_, t)| t.len().min(max_len)).max().unwrap_or(0) + 1;
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (r, (s, t)) in pairs.iter().enumerate() {
            let s = &s[..s.len().min(max_len)];
            let t = &t[..t.len().min(max_len)];
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            tgt_in[r * tgt_len] = BOS;
            tgt_in[r * tgt_len + 1..r * tgt_len + 1 + t.len()].copy_from_slice(t);
            tgt_out[r * tgt_len..r * tgt_len + t.len()].copy_from_slice(t);
            tgt_out[r * tgt_len + t.len()] = EOS;
        }
        Self {
            size,
            src_len,
            tgt_len,
            src,
            tgt_in,
            tgt_out,
            indices,
        }
    }

    pub fn src_mask(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t != PAD).collect()
    }

    pub fn tgt_mask(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&t| t != PAD).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Splits the corpus into batches of `batch_size`; `shuffle_seed` selects a
/// deterministic permutation, `None` keeps corpus order.
pub fn batch_iterator(
    corpus: &ParallelCorpus,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let pairs: Vec<(&[u32], &[u32])> = idx
            .iter()
            .map(|&i| (corpus.pairs[i].0.as_slice(), corpus.pairs[i].1.as_slice()))
            .collect();
        Batch::from_pairs(&pairs, idx, max_len)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
}

/// Random sequences over `vocab_n` symbols; target is the source (copy) or its
/// reversal.
pub fn synthetic_task(
    kind: TaskKind,
    vocab_n: usize,
    len_range: RangeInclusive<usize>,
    count: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_n < 2 {
        return Err(invalid("synthetic tasks need at least two symbols"));
    }
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(invalid("sequence lengths must be a non-empty range of positive values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = RESERVED.len() as u32;
    let pairs = (0..count)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let src: Vec<u32> = (0..len)
                .map(|_| first + rng.gen_range(0..vocab_n as u32))
                .collect();
            let tgt = match kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
            };
            (src, tgt)
        })
        .collect();
    let vocab = Vocab::synthetic(vocab_n);
    Ok(ParallelCorpus {
        pairs,
        src_vocab: vocab.clone(),
        tgt_vocab: vocab,
    })
}
