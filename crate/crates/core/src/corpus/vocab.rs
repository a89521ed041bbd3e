use std::collections::{BTreeSet, HashMap};

use super::LabeledCorpus;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Word ↔ index map. Index 0 is padding, index 1 the unknown token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_INDEX: usize = 0;
    pub const UNK_INDEX: usize = 1;

    /// Builds from an explicit word list, which must start with the padding
    /// and unknown tokens and contain no duplicates.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Config(format!(
                "vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every distinct token of the given corpora, in sorted order after the
    /// two reserved entries.
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a LabeledCorpus>) -> Self {
        let mut distinct = BTreeSet::new();
        for c in corpora {
            for e in c.examples() {
                for t in &e.tokens {
                    if t != PAD && t != UNK {
                        distinct.insert(t.clone());
                    }
                }
            }
        }
        let words = [PAD.to_string(), UNK.to_string()].into_iter().chain(distinct).collect();
        Self::from_words(words).expect("reserved tokens excluded")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of `word`, or the unknown index.
    pub fn lookup(&self, word: &str) -> usize {
        self.get(word).unwrap_or(Self::UNK_INDEX)
    }

    pub fn word(&self, index: usize) -> &str {
        &self.words[index]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventExample;

    #[test]
    fn reserved_indices_and_contiguity() {
        let c = LabeledCorpus::new(vec![
            EventExample::new(vec!["b".into(), "a".into(), "b".into()], 0, "L").unwrap(),
        ]);
        let v = Vocabulary::from_corpora([&c]);
        assert_eq!(v.words(), &[PAD, UNK, "a", "b"]);
        assert_eq!(v.lookup("a"), 2);
        assert_eq!(v.lookup("zzz"), Vocabulary::UNK_INDEX);
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.get(w), Some(i));
        }
    }

    #[test]
    fn rejects_duplicates() {
        let words = vec![PAD.into(), UNK.into(), "x".into(), "x".into()];
        assert!(Vocabulary::from_words(words).is_err());
    }
}
