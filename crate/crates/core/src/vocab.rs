//! Word vocabulary with reserved padding and unknown ids.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary from words; ids after the reserved two follow
    /// sorted order, so the result does not depend on input order.
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sorted: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !w.is_empty() && w != PAD_TOKEN && w != UNK_TOKEN)
            .collect();
        let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(sorted)
            .collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.len() })
    }

    pub fn encode<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        words.into_iter().map(|w| self.id(w)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::data("vocabulary must start with <pad> and <unk>"));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Vocab { tokens, index })
    }
}

/// Lowercases and splits on whitespace, dropping surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}
