use std::collections::HashMap;

use super::SentencePair;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Whitespace-token vocabulary with dense ids; ids 0..3 are reserved for
/// padding, the sentence marker and unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_count` times on either side, ordered by
    /// descending frequency and then lexicographically.
    pub fn build(pairs: &[SentencePair], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in pairs {
            for tok in p.source.split_whitespace().chain(p.target.split_whitespace()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("built vocabularies are valid")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Format(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization without the sentence marker.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pair_vocab() {
        let v = Vocab::build(&[SentencePair::new("a b", "c")], 1);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(CLS), Some("[CLS]"));
        assert_eq!(v.token(UNK), Some("[UNK]"));
    }

    #[test]
    fn min_count_filters_singletons() {
        let v = Vocab::build(&[SentencePair::new("a b", "c")], 2);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&[SentencePair::new("zeta alpha mid", "mid")], 1);
        assert_eq!(v.id("mid"), 3);
        assert_eq!(v.id("alpha"), 4);
        assert_eq!(v.id("zeta"), 5);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = Vocab::build(&[SentencePair::new("a", "b")], 1);
        assert_eq!(v.encode("a nope"), vec![v.id("a"), UNK]);
    }

    #[test]
    fn from_tokens_requires_reserved_prefix() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let v = Vocab::build(&[SentencePair::new("a", "b")], 1);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
            let text = words.join(" ");
            let v = Vocab::build(&[SentencePair::new(text.clone(), "x")], 1);
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
