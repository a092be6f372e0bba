use serde::{Deserialize, Serialize};

/// Placeholder emitted for payloads with no content left after punctuation
/// removal. It is empty, so it never collides with a real segment and always
/// encodes to the UNK index.
pub const UNK_PLACEHOLDER: &str = "";

/// Joins words inside a word n-gram. Non-ASCII, so it is not punctuation.
pub const WORD_JOINER: char = '\u{2581}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Words,
    Bigram,
    #[default]
    Trigram,
}

impl TokenizerMode {
    pub fn ngram(self) -> Option<usize> {
        match self {
            TokenizerMode::Words => None,
            TokenizerMode::Bigram => Some(2),
            TokenizerMode::Trigram => Some(3),
        }
    }
}

/// Whether bigram/trigram modes slide over characters within a segment or
/// over consecutive segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NgramUnit {
    #[default]
    Char,
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub mode: TokenizerMode,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The punctuation set: every ASCII character that is not alphanumeric.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii() && !c.is_ascii_alphanumeric()
}

fn segments(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(is_punctuation)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn char_ngrams(segment: &str, n: usize, out: &mut Vec<String>) {
    let chars: Vec<char> = segment.chars().collect();
    if chars.len() <= n {
        out.push(segment.to_owned());
        return;
    }
    out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
}

pub fn tokenize(clean: &str, mode: TokenizerMode) -> TokenSequence {
    tokenize_with(clean, mode, NgramUnit::Char)
}

pub fn tokenize_with(clean: &str, mode: TokenizerMode, unit: NgramUnit) -> TokenSequence {
    let segs = segments(clean);
    let tokens = if segs.is_empty() {
        vec![UNK_PLACEHOLDER.to_owned()]
    } else {
        match (mode.ngram(), unit) {
            (None, _) => segs,
            (Some(n), NgramUnit::Char) => {
                let mut out = Vec::new();
                for s in &segs {
                    char_ngrams(s, n, &mut out);
                }
                out
            }
            (Some(n), NgramUnit::Word) => {
                if segs.len() <= n {
                    vec![segs.join(&WORD_JOINER.to_string())]
                } else {
                    segs.windows(n)
                        .map(|w| w.join(&WORD_JOINER.to_string()))
                        .collect()
                }
            }
        }
    };
    TokenSequence { tokens, mode }
}
