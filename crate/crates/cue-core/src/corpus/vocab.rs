//! Whitespace/lowercase tokenizer with a frequency-capped vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>"];

/// Ids that the LM head must never emit.
pub const FORBIDDEN_PREDICTIONS: [u32; 3] = [PAD, BOS, CLS];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an iterator of text lines. The most frequent
    /// tokens are kept, ties broken lexicographically; reserved ids occupy
    /// the lowest indices.
    pub fn build<I, S>(texts: I, max_size: usize, min_count: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < RESERVED.len() {
            return Err(CueError::VocabTooSmall {
                max_size,
                reserved: RESERVED.len(),
            });
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                saw_any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(CueError::EmptyInput("vocabulary corpus".into()));
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count as u64 && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - RESERVED.len());

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Vocabulary {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Tokenizes text; unknown words map to UNK, output truncated to
    /// `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        tokenize(text)
            .take(max_len)
            .map(|tok| self.token_to_id.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(&self.id_to_token)
            .map_err(|e| CueError::json("vocabulary", e))?;
        std::fs::write(path, json).map_err(|e| CueError::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Vocabulary> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CueError::io(path.display().to_string(), e))?;
        let id_to_token: Vec<String> =
            serde_json::from_str(&raw).map_err(|e| CueError::json("vocabulary", e))?;
        Ok(Vocabulary::from_tokens(id_to_token))
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_most_frequent() {
        let v = Vocabulary::build(["a a b"], RESERVED.len() + 2, 1).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_some());
        assert_eq!(v.len(), RESERVED.len() + 2);
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let v = Vocabulary::build(["b a"], RESERVED.len() + 1, 1).unwrap();
        assert!(v.id_of("a").is_some(), "lexicographically smaller token wins");
        assert!(v.id_of("b").is_none());
    }

    #[test]
    fn too_small_max_size_errors() {
        let err = Vocabulary::build(["a"], 2, 1).unwrap_err();
        assert!(matches!(err, CueError::VocabTooSmall { .. }));
    }

    #[test]
    fn unknown_words_become_unk() {
        let v = Vocabulary::build(["a b"], 16, 1).unwrap();
        let ids = v.encode("a zz b", 10);
        assert_eq!(ids[1], UNK);
        assert_eq!(ids.len(), 3, "length unchanged by unknown words");
    }

    #[test]
    fn encode_decode_round_trip_in_vocab() {
        let v = Vocabulary::build(["the cat sat on the mat"], 64, 1).unwrap();
        let ids = v.encode("the cat sat", 10);
        assert_eq!(v.encode(&v.decode(&ids), 10), ids);
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(["a a b"], 16, 2).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_none());
    }
}
