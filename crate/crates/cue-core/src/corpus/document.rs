//! Documents, token sequences and per-sentence context assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;

/// Context value used for the first sentence of a document, which has no
/// predecessor; the previous-sentence signal resets at document boundaries.
pub const NO_PREVIOUS: &str = "<no-previous>";

/// Context-type name under which the previous sentence is exposed.
pub const PREVIOUS_SENTENCE: &str = "previous_sentence";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The unit of corpus ingestion: tokenized sentences plus named context
/// strings (non-textual metadata is pre-rendered to English text).
#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<TokenSequence>,
    pub context: BTreeMap<String, String>,
}

/// On-disk JSONL form: one document per line, sentences as raw text.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawDocument {
    pub id: String,
    pub sentences: Vec<String>,
    pub context: BTreeMap<String, String>,
}

/// The context strings attached to one target sentence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextSet {
    /// (context-type-name, context-string) pairs; K may be zero.
    pub slots: Vec<(String, String)>,
}

impl ContextSet {
    pub fn new(slots: Vec<(String, String)>) -> Self {
        ContextSet { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Canonical slot order; the encoder sorts before pooling so that
    /// permutation invariance is exact rather than tolerance-bound.
    pub fn sorted(mut self) -> Self {
        self.slots.sort();
        self
    }
}

/// Assembles the context set for one sentence: document metadata plus the
/// previous sentence (reset per document). `filter`, when given, keeps only
/// the named context types.
pub fn context_set_for(
    doc: &Document,
    sentence_idx: usize,
    vocab: &Vocabulary,
    filter: Option<&[String]>,
) -> ContextSet {
    let keep = |name: &str| match filter {
        Some(f) => f.iter().any(|n| n == name),
        None => true,
    };
    let mut slots: Vec<(String, String)> = doc
        .context
        .iter()
        .filter(|(name, _)| keep(name))
        .map(|(name, value)| (name.clone(), value.clone()))
        .collect();
    if keep(PREVIOUS_SENTENCE) {
        let prev = if sentence_idx == 0 {
            NO_PREVIOUS.to_string()
        } else {
            vocab.decode(&doc.sentences[sentence_idx - 1].ids)
        };
        slots.push((PREVIOUS_SENTENCE.to_string(), prev));
    }
    ContextSet::new(slots)
}

/// All context-type names present in a corpus, previous sentence included.
pub fn context_type_names(docs: &[Document]) -> Vec<String> {
    let mut names: std::collections::BTreeSet<String> = docs
        .iter()
        .flat_map(|d| d.context.keys().cloned())
        .collect();
    names.insert(PREVIOUS_SENTENCE.to_string());
    names.into_iter().collect()
}
