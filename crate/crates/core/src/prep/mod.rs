//! Payload preprocessing: escape recovery, punctuation splitting, n-gram
//! tokenization and the fixed-length index encoding fed to the encoder.

mod normalize;
mod tokenize;
mod vocab;

pub use normalize::{decode_round, normalize, normalize_bytes, RawPayload, MAX_DECODE_ROUNDS};
pub use tokenize::{
    is_punctuation, tokenize, tokenize_with, NgramUnit, TokenSequence, TokenizerMode,
    UNK_PLACEHOLDER, WORD_JOINER,
};
pub use vocab::{EncodedPayload, Vocabulary, PAD, UNK};

/// Normalizes and tokenizes one payload.
pub fn prepare(text: &str, mode: TokenizerMode, unit: NgramUnit) -> TokenSequence {
    tokenize_with(&normalize_bytes(text.as_bytes()), mode, unit)
}
