//! JSONL corpus ingestion.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::document::{Document, RawDocument, TokenSequence};
use super::vocab::Vocabulary;
use crate::error::{CueError, Result};

pub const DEFAULT_MAX_SENTENCE_LEN: usize = 64;

/// Streams documents from a JSONL corpus file, tokenizing sentences against
/// `vocab`. Context strings are kept raw; they are tokenized lazily by the
/// context encoder with the same vocabulary.
pub fn load_corpus<'a>(
    path: &'a Path,
    vocab: &'a Vocabulary,
    max_sentence_len: usize,
) -> Result<impl Iterator<Item = Result<Document>> + 'a> {
    let file =
        std::fs::File::open(path).map_err(|e| CueError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut seen: HashSet<String> = HashSet::new();
    let iter = reader.lines().enumerate().map(move |(idx, line)| {
        let line_no = idx + 1;
        let line = line.map_err(|e| CueError::io(format!("{}:{line_no}", path.display()), e))?;
        let raw: RawDocument =
            serde_json::from_str(&line).map_err(|e| CueError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                reason: e.to_string(),
            })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CueError::DuplicateDocId {
                id: raw.id,
                line: line_no,
            });
        }
        tokenize_document(raw, vocab, max_sentence_len).map_err(|reason| {
            CueError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                reason,
            }
        })
    });
    Ok(iter)
}

/// Loads a whole corpus file into memory.
pub fn load_corpus_vec(
    path: &Path,
    vocab: &Vocabulary,
    max_sentence_len: usize,
) -> Result<Vec<Document>> {
    load_corpus(path, vocab, max_sentence_len)?.collect()
}

fn tokenize_document(
    raw: RawDocument,
    vocab: &Vocabulary,
    max_sentence_len: usize,
) -> std::result::Result<Document, String> {
    if raw.sentences.is_empty() {
        return Err("document has no sentences".into());
    }
    for (name, value) in &raw.context {
        if value.trim().is_empty() {
            return Err(format!("context value for `{name}` is empty"));
        }
    }
    let sentences = raw
        .sentences
        .iter()
        .map(|s| TokenSequence::new(vocab.encode(s, max_sentence_len)))
        .collect();
    Ok(Document {
        id: raw.id,
        sentences,
        context: raw.context,
    })
}

/// Writes raw documents as JSONL, one per line.
pub fn save_corpus(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CueError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).map_err(|e| CueError::json("corpus line", e))?;
        writeln!(w, "{line}").map_err(|e| CueError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Iterates the raw text lines of a corpus file (sentences and context
/// values) for vocabulary building.
pub fn corpus_texts(path: &Path) -> Result<Vec<String>> {
    let file =
        std::fs::File::open(path).map_err(|e| CueError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CueError::io(path.display().to_string(), e))?;
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| CueError::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.extend(raw.sentences);
        out.extend(raw.context.into_values());
    }
    Ok(out)
}
