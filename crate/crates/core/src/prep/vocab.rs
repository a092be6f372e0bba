use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tokenize::{TokenSequence, TokenizerMode, UNK_PLACEHOLDER};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Frequency-ranked token table. Index 0 is padding, index 1 is unknown.
///
/// Serializes as the ordered token list, so equal vocabularies produce
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub max_size: usize,
    pub mode: TokenizerMode,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    mode: TokenizerMode,
    max_size: usize,
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.max_size, r.mode)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            mode: v.mode,
            max_size: v.max_size,
            tokens: v.tokens.into_iter().skip(2).collect(),
        }
    }
}

/// Output of [`Vocabulary::encode`]: exactly `max_len` indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPayload {
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedPayload {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl Vocabulary {
    /// `tokens` excludes the two reserved entries.
    fn from_tokens(tokens: Vec<String>, max_size: usize, mode: TokenizerMode) -> Self {
        let mut all = Vec::with_capacity(tokens.len() + 2);
        all.push("<pad>".to_owned());
        all.push("<unk>".to_owned());
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens: all,
            index,
            max_size,
            mode,
        }
    }

    /// Keeps the `max_size - 2` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build(corpus: &[TokenSequence], max_size: usize, mode: TokenizerMode) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for t in &seq.tokens {
                if t != UNK_PLACEHOLDER {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(2);
        let tokens = ranked
            .into_iter()
            .take(keep)
            .map(|(t, _)| t.to_owned())
            .collect();
        Self::from_tokens(tokens, max_size, mode)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Tokens in index order, excluding PAD and UNK.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// Maps tokens to indices, truncating or padding to `max_len`.
    pub fn encode(&self, seq: &TokenSequence, max_len: usize) -> EncodedPayload {
        assert!(max_len >= 1, "max_len must be at least 1");
        let mut indices: Vec<usize> = seq
            .tokens
            .iter()
            .take(max_len)
            .map(|t| self.get(t).unwrap_or(UNK))
            .collect();
        let real = indices.len();
        indices.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| i < real).collect();
        EncodedPayload { indices, mask }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            mode: TokenizerMode::Words,
        }
    }

    #[test]
    fn keeps_most_frequent() {
        let v = Vocabulary::build(&[seq(&["a", "a", "b"])], 3, TokenizerMode::Words);
        assert_eq!(v.len(), 3);
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), None);
    }

    #[test]
    fn empty_corpus_has_reserved_only() {
        let v = Vocabulary::build(&[], 10, TokenizerMode::Words);
        assert_eq!(v.len(), 2);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let v = Vocabulary::build(&[seq(&["x", "y", "y", "z"])], 10, TokenizerMode::Words);
        let once: Vocabulary = serde_json::from_slice(&serde_json::to_vec(&v).unwrap()).unwrap();
        let twice: Vocabulary = serde_json::from_slice(&serde_json::to_vec(&once).unwrap()).unwrap();
        assert_eq!(once, v);
        assert_eq!(twice, v);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(&[seq(&["b", "a"])], 3, TokenizerMode::Words);
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), None);
    }

    #[test]
    fn reserved_names_do_not_shadow_real_tokens() {
        let v = Vocabulary::build(&[seq(&["<unk>"])], 5, TokenizerMode::Words);
        assert_eq!(v.get("<unk>"), Some(2));
    }

    #[test]
    fn encode_pads_and_masks() {
        let v = Vocabulary::build(&[seq(&["a"])], 3, TokenizerMode::Words);
        let e = v.encode(&seq(&["a"]), 3);
        assert_eq!(e.indices, [2, 0, 0]);
        assert_eq!(e.mask, [true, false, false]);
    }

    #[test]
    fn encode_unknown_and_truncate() {
        let v = Vocabulary::build(&[seq(&["a", "b", "c", "d", "e"])], 10, TokenizerMode::Words);
        assert_eq!(v.encode(&seq(&["zzz"]), 1).indices, [UNK]);
        let e = v.encode(&seq(&["a", "b", "c", "d", "e"]), 3);
        assert_eq!(e.indices, [v.get("a").unwrap(), v.get("b").unwrap(), v.get("c").unwrap()]);
        assert_eq!(e.real_len(), 3);
    }

    #[test]
    fn placeholder_encodes_as_unk() {
        let v = Vocabulary::build(&[seq(&[UNK_PLACEHOLDER])], 10, TokenizerMode::Words);
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode(&seq(&[UNK_PLACEHOLDER]), 2).indices, [UNK, PAD]);
    }

    proptest! {
        #[test]
        fn encode_length_and_mask(
            toks in proptest::collection::vec("[a-c]{1,2}", 0..20),
            max_len in 1usize..12,
        ) {
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            let s = seq(&refs);
            let v = Vocabulary::build(std::slice::from_ref(&s), 6, TokenizerMode::Words);
            let e = v.encode(&s, max_len);
            prop_assert_eq!(e.indices.len(), max_len);
            prop_assert_eq!(e.real_len(), toks.len().min(max_len));
        }

        #[test]
        fn build_is_deterministic(toks in proptest::collection::vec("[a-e]{1,3}", 0..40), max in 2usize..8) {
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            let corpus = [seq(&refs)];
            let a = serde_json::to_vec(&Vocabulary::build(&corpus, max, TokenizerMode::Words)).unwrap();
            let b = serde_json::to_vec(&Vocabulary::build(&corpus, max, TokenizerMode::Words)).unwrap();
            prop_assert_eq!(a, b);
            let v = Vocabulary::build(&corpus, max, TokenizerMode::Words);
            prop_assert!(v.len() <= max.max(2));
            for (i, t) in v.learned_tokens().iter().enumerate() {
                prop_assert_eq!(v.get(t), Some(i + 2));
            }
        }
    }
}
