//! Tokenization and deterministic synthetic corpora.

pub mod corpus;
pub mod generate;
pub mod stack;
pub mod tokenizer;

pub use corpus::{spec_hash, Batch, BatchStream, Corpus, Split, VALIDATION_FRACTION};
pub use generate::{generate_text, SyntheticTaskSpec, TaskKind};
pub use tokenizer::{Tokenizer, PAD_ID, UNK_ID};

/// Vocabulary over every character the given generators emit.
pub fn build_tokenizer(specs: &[SyntheticTaskSpec]) -> Tokenizer {
    let texts: Vec<String> = specs.iter().map(generate_text).collect();
    Tokenizer::from_texts(texts.iter().map(String::as_str))
}
