//! Corpus ingestion, tokenization, dataset splits and the synthetic
//! contextual corpus generator.

pub mod document;
pub mod loader;
pub mod split;
pub mod synth;
pub mod vocab;

pub use document::{
    context_set_for, context_type_names, ContextSet, Document, RawDocument, TokenSequence,
    NO_PREVIOUS, PREVIOUS_SENTENCE,
};
pub use loader::{corpus_texts, load_corpus, load_corpus_vec, save_corpus, DEFAULT_MAX_SENTENCE_LEN};
pub use split::{split_corpus, SplitRole, SplitSpec};
pub use synth::{generate_synthetic_corpus, GroundTruth, SyntheticCorpusConfig};
pub use vocab::{tokenize, Vocabulary, BOS, CLS, EOS, FORBIDDEN_PREDICTIONS, PAD, RESERVED, UNK};

/// Tokenizes the raw documents of a generated corpus against a vocabulary.
pub fn tokenize_raw(
    raw: &[RawDocument],
    vocab: &Vocabulary,
    max_sentence_len: usize,
) -> Vec<Document> {
    raw.iter()
        .map(|r| Document {
            id: r.id.clone(),
            sentences: r
                .sentences
                .iter()
                .map(|s| TokenSequence::new(vocab.encode(s, max_sentence_len)))
                .collect(),
            context: r.context.clone(),
        })
        .collect()
}

/// Builds a vocabulary from raw documents, counting sentence text and
/// context values alike (context strings share the sentence vocabulary).
pub fn vocabulary_from_raw(
    raw: &[RawDocument],
    max_size: usize,
    min_count: usize,
) -> crate::Result<Vocabulary> {
    let texts = raw.iter().flat_map(|d| {
        d.sentences
            .iter()
            .cloned()
            .chain(d.context.values().cloned())
    });
    Vocabulary::build(texts, max_size, min_count)
}
