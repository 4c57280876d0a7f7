//! Parallel corpora: TSV ingestion, whitespace vocabularies, batching, and a
//! seeded pseudo-parallel generator.

mod synth;
mod vocab;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_corpus, PseudoLanguage, SyntheticPair};
pub use vocab::{Vocab, CLS, PAD, UNK};

/// One translation pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl CorpusSplit {
    /// Assigns pair `i` to train, dev or test by `i mod 20`: 18 slots for
    /// train, then one each for dev and test.
    pub fn by_index(pairs: Vec<SentencePair>) -> Self {
        let mut split = Self::default();
        for (i, pair) in pairs.into_iter().enumerate() {
            match i % 20 {
                18 => split.dev.push(pair),
                19 => split.test.push(pair),
                _ => split.train.push(pair),
            }
        }
        split
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position in the original pair order of `train[j]`.
    pub fn train_line_index(j: usize) -> usize {
        j / 18 * 20 + j % 18
    }

    /// Position in the original pair order of `dev[j]`.
    pub fn dev_line_index(j: usize) -> usize {
        j * 20 + 18
    }

    /// Every pair, in original line order.
    pub fn all_pairs(&self) -> Vec<SentencePair> {
        let (mut tr, mut dv, mut ts) = (self.train.iter(), self.dev.iter(), self.test.iter());
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let next = match i % 20 {
                18 => dv.next(),
                19 => ts.next(),
                _ => tr.next(),
            };
            out.extend(next.cloned());
        }
        out
    }
}

/// Result of reading a bitext file.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub split: CorpusSplit,
    /// Lines skipped because they lacked a tab or had an empty side.
    pub malformed: usize,
}

/// Parses `source<TAB>target` lines. Malformed lines are skipped and counted;
/// accepted pairs are truncated at `max_pairs` and split by index.
pub fn parse_tsv(text: &str, max_pairs: Option<usize>) -> LoadedCorpus {
    let limit = max_pairs.unwrap_or(usize::MAX);
    let mut pairs = Vec::new();
    let mut malformed = 0;
    for line in text.lines() {
        if pairs.len() >= limit {
            break;
        }
        let line = line.strip_suffix('\r').unwrap_or(line);
        match line.split_once('\t') {
            Some((s, t)) if !s.trim().is_empty() && !t.trim().is_empty() && !t.contains('\t') => {
                pairs.push(SentencePair::new(s, t));
            }
            _ => malformed += 1,
        }
    }
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed bitext line(s)");
    }
    LoadedCorpus {
        split: CorpusSplit::by_index(pairs),
        malformed,
    }
}

pub fn load_tsv(path: impl AsRef<Path>, max_pairs: Option<usize>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_tsv(&text, max_pairs))
}

pub fn write_tsv(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        writeln!(out, "{}\t{}", p.source, p.target).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Token ids and padding mask for `rows` sentences padded to `seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenBatch {
    /// Tokenizes each sentence as `CLS` plus its whitespace tokens, truncated
    /// to `max_seq_len`, and pads to `max(longest row, min_len)`.
    pub fn encode(sentences: &[&str], vocab: &Vocab, max_seq_len: usize, min_len: usize) -> Self {
        let rows: Vec<Vec<u32>> = sentences
            .iter()
            .map(|s| {
                let mut ids = vec![CLS];
                ids.extend(vocab.encode(s));
                ids.truncate(max_seq_len);
                ids
            })
            .collect();
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(1).max(min_len);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut mask = Vec::with_capacity(rows.len() * seq_len);
        for row in &rows {
            ids.extend_from_slice(row);
            mask.extend(std::iter::repeat_n(1, row.len()));
            ids.extend(std::iter::repeat_n(PAD, seq_len - row.len()));
            mask.extend(std::iter::repeat_n(0, seq_len - row.len()));
        }
        Self {
            rows: rows.len(),
            seq_len,
            ids,
            mask,
        }
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// First column is CLS and the mask covers exactly the non-PAD ids.
    pub fn is_well_formed(&self) -> bool {
        (0..self.rows).all(|r| {
            let (ids, mask) = (self.row_ids(r), self.row_mask(r));
            ids[0] == CLS
                && ids
                    .iter()
                    .zip(mask)
                    .all(|(&id, &m)| (m == 1) == (id != PAD))
        })
    }
}

/// `N` tokenized translation pairs. Both sides share one padded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelBatch {
    pub source: TokenBatch,
    pub target: TokenBatch,
    /// Index of each row's pair within the slice the batch was drawn from.
    pub pair_indices: Vec<usize>,
}

impl ParallelBatch {
    pub fn len(&self) -> usize {
        self.pair_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_indices.is_empty()
    }
}

pub fn tokenize_pairs(
    pairs: &[SentencePair],
    indices: &[usize],
    vocab: &Vocab,
    max_seq_len: usize,
) -> ParallelBatch {
    let src: Vec<&str> = indices.iter().map(|&i| pairs[i].source.as_str()).collect();
    let tgt: Vec<&str> = indices.iter().map(|&i| pairs[i].target.as_str()).collect();
    let s = TokenBatch::encode(&src, vocab, max_seq_len, 1);
    let t = TokenBatch::encode(&tgt, vocab, max_seq_len, 1);
    let seq_len = s.seq_len.max(t.seq_len);
    ParallelBatch {
        source: TokenBatch::encode(&src, vocab, max_seq_len, seq_len),
        target: TokenBatch::encode(&tgt, vocab, max_seq_len, seq_len),
        pair_indices: indices.to_vec(),
    }
}

/// Shuffles pairs with `seed`, cuts them into batches of `batch_size` and
/// drops a trailing batch with fewer than two pairs.
pub fn make_batches(
    pairs: &[SentencePair],
    vocab: &Vocab,
    batch_size: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<Vec<ParallelBatch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    if max_seq_len < 2 {
        return Err(Error::Config(format!(
            "max sequence length must be at least 2, got {max_seq_len}"
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| tokenize_pairs(pairs, c, vocab, max_seq_len))
        .collect())
}
