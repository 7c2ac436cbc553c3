use std::collections::HashMap;

use crate::error::{Error, Result};

/// Word ↔ id table. Id 0 is reserved for padding and never produced by
/// [`Vocabulary::tokenize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

pub const PAD: &str = "<pad>";

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD.to_string()];
        all.extend(words.into_iter().map(Into::into).filter(|w| w != PAD));
        let mut ids = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary word {w:?}")));
            }
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words: all, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    /// Whitespace split, then word → id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.ids.get(w) {
                Some(&id) if id != 0 => Ok(id),
                _ => Err(Error::UnknownWord(w.to_string())),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i)
                    .filter(|_| i != 0)
                    .map(String::as_str)
                    .ok_or_else(|| Error::InvalidArgument(format!("token id {i} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
