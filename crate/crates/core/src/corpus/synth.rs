use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusSplit, SentencePair};
use crate::error::{Error, Result};

const SOURCE_PREFIX: &str = "w";
const MIN_LEN: usize = 3;
const MAX_LEN: usize = 12;

/// A deterministic "translation": token-wise bijective substitution into a
/// prefixed token set, optionally followed by reversing the sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLanguage {
    pub prefix: String,
    /// `substitution[i] = j` maps source token `w{i}` to `{prefix}{j}`.
    pub substitution: Vec<usize>,
    pub reverse: bool,
}

impl PseudoLanguage {
    pub fn identity(vocab_size: usize) -> Self {
        Self {
            prefix: SOURCE_PREFIX.into(),
            substitution: (0..vocab_size).collect(),
            reverse: false,
        }
    }

    /// Translates a source sentence of `w{i}` tokens. Returns `None` for
    /// tokens outside the source vocabulary.
    pub fn translate(&self, source: &str) -> Option<String> {
        let mut out = source
            .split_whitespace()
            .map(|tok| {
                let i: usize = tok.strip_prefix(SOURCE_PREFIX)?.parse().ok()?;
                let j = *self.substitution.get(i)?;
                Some(format!("{}{j}", self.prefix))
            })
            .collect::<Option<Vec<_>>>()?;
        if self.reverse {
            out.reverse();
        }
        Some(out.join(" "))
    }

    /// Maps a target sentence back to source tokens.
    pub fn back_translate(&self, target: &str) -> Option<String> {
        let mut inverse = vec![0; self.substitution.len()];
        for (i, &j) in self.substitution.iter().enumerate() {
            *inverse.get_mut(j)? = i;
        }
        let mut out = target
            .split_whitespace()
            .map(|tok| {
                let j: usize = tok.strip_prefix(self.prefix.as_str())?.parse().ok()?;
                Some(format!("{SOURCE_PREFIX}{}", inverse.get(j)?))
            })
            .collect::<Option<Vec<_>>>()?;
        if self.reverse {
            out.reverse();
        }
        Some(out.join(" "))
    }
}

/// One generated language pair together with the rule that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPair {
    pub language: PseudoLanguage,
    pub corpus: CorpusSplit,
}

/// Generates `n_langs` pseudo-parallel corpora of `n_pairs` each.
///
/// Sources are random sequences of 3 to 12 tokens over `w0..w{vocab_size-1}`.
/// Language `l` substitutes each token through its own seeded permutation
/// into `v{l}_*` tokens and reverses the sentence.
pub fn synth_corpus(
    n_pairs: usize,
    vocab_size: usize,
    n_langs: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    if vocab_size < 10 {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least 10 tokens, got {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_langs);
    for lang in 0..n_langs {
        let mut substitution: Vec<usize> = (0..vocab_size).collect();
        substitution.shuffle(&mut rng);
        let language = PseudoLanguage {
            prefix: format!("v{lang}_"),
            substitution,
            reverse: true,
        };
        let pairs = (0..n_pairs)
            .map(|_| {
                let len = rng.random_range(MIN_LEN..=MAX_LEN);
                let source = (0..len)
                    .map(|_| format!("{SOURCE_PREFIX}{}", rng.random_range(0..vocab_size)))
                    .collect::<Vec<_>>()
                    .join(" ");
                let target = language.translate(&source).expect("generated tokens are in range");
                SentencePair { source, target }
            })
            .collect();
        out.push(SyntheticPair {
            language,
            corpus: CorpusSplit::by_index(pairs),
        });
    }
    Ok(out)
}
