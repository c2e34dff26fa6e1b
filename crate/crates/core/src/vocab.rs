use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{DialogueCorpus, SlotSchema};
use crate::error::{DstError, Result};
use crate::text::tokenize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SLOT: usize = 4;
pub const VALUE: usize = 5;
pub const SEMI: usize = 6;
pub const TURN: usize = 7;

/// Special tokens, in id order.
pub const RESERVED: [&str; 8] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[SLOT]", "[VALUE]", ";", "⟨t⟩"];

pub fn is_special(id: usize) -> bool {
    id < RESERVED.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Reserved tokens, then schema tokens, then corpus tokens in order of
    /// first appearance.
    pub fn build(schema: &SlotSchema, corpus: &DialogueCorpus) -> Self {
        let mut vocab = Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect());
        for slot in schema.slots() {
            vocab.extend(tokenize(&slot.name));
            for v in &slot.values {
                vocab.extend(tokenize(v));
            }
        }
        for d in &corpus.dialogues {
            for t in &d.turns {
                vocab.extend(t.tokens());
            }
        }
        vocab
    }

    fn extend(&mut self, tokens: Vec<String>) {
        for t in tokens {
            if !self.index.contains_key(&t) {
                self.index.insert(t.clone(), self.tokens.len());
                self.tokens.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// One token per line, reserved block first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(DstError::Config("vocabulary must start with the reserved token block".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(DstError::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Swaps the ids of two non-reserved tokens.
    pub fn swap(&mut self, a: usize, b: usize) {
        assert!(!is_special(a) && !is_special(b));
        self.tokens.swap(a, b);
        self.index.insert(self.tokens[a].clone(), a);
        self.index.insert(self.tokens[b].clone(), b);
    }
}
