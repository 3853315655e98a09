use std::collections::HashMap;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use super::ConditioningError;

/// Newline-delimited word list shipped with the crate.
pub const VOCAB_TEXT: &str = include_str!("../../assets/vocab.txt");

#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn parse(text: &str) -> Result<Self, ConditioningError> {
        let words: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.split_whitespace().count() != 1 {
                return Err(ConditioningError::Vocabulary(format!(
                    "entry {w:?} is not a single word"
                )));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(ConditioningError::Vocabulary(format!(
                    "duplicate entry {w:?}"
                )));
            }
        }
        Ok(Self { words, index })
    }

    pub fn builtin() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| Vocabulary::parse(VOCAB_TEXT).expect("bundled vocabulary is valid"))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Whitespace tokenization; rejects the first out-of-vocabulary word.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>, ConditioningError> {
        prompt
            .split_whitespace()
            .enumerate()
            .map(|(i, w)| {
                self.id(w).ok_or_else(|| ConditioningError::UnknownWord {
                    word: w.to_string(),
                    position: i + 1,
                })
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
