//! Event mentions, corpus files, vocabularies and embeddings.

mod embeddings;
mod synthetic;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, position_row, random_word_table, EmbeddingTable, EMBEDDING_INIT_RANGE};
pub use synthetic::{generate_synthetic, label_name, signature_words, SyntheticSpec};
pub use vocab::{Vocabulary, PAD, UNK};

/// One event mention: a tokenized sentence, the trigger position and the
/// event type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventExample {
    pub tokens: Vec<String>,
    pub trigger: usize,
    pub label: String,
}

impl EventExample {
    pub fn new(tokens: Vec<String>, trigger: usize, label: impl Into<String>) -> Result<Self> {
        let ex = Self {
            tokens,
            trigger,
            label: label.into(),
        };
        ex.validate().map_err(|message| Error::Validation { line: 0, message })?;
        Ok(ex)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        if self.label.is_empty() {
            return Err("empty label".into());
        }
        if self.trigger >= self.tokens.len() {
            return Err(format!(
                "trigger {} out of range for {} tokens",
                self.trigger,
                self.tokens.len()
            ));
        }
        Ok(())
    }

    pub fn trigger_word(&self) -> &str {
        &self.tokens[self.trigger]
    }
}

/// A list of mentions together with the set of labels they carry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCorpus {
    examples: Vec<EventExample>,
    labels: BTreeSet<String>,
}

impl LabeledCorpus {
    pub fn new(examples: Vec<EventExample>) -> Self {
        let labels = examples.iter().map(|e| e.label.clone()).collect();
        Self { examples, labels }
    }

    pub fn examples(&self) -> &[EventExample] {
        &self.examples
    }

    pub fn labels(&self) -> &BTreeSet<String> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example positions grouped by label, labels in sorted order.
    pub fn indices_by_label(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            map.entry(e.label.as_str()).or_default().push(i);
        }
        map
    }

    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        self.indices_by_label().into_iter().map(|(l, v)| (l, v.len())).collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads one mention per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<LabeledCorpus> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: EventExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|message| Error::Validation {
            line: line_no,
            message,
        })?;
        examples.push(ex);
    }
    Ok(LabeledCorpus::new(examples))
}

/// Drops every example whose label occurs fewer than `min_count` times.
pub fn filter_rare_labels(corpus: &LabeledCorpus, min_count: usize) -> LabeledCorpus {
    let counts = corpus.label_counts();
    let kept = corpus
        .examples
        .iter()
        .filter(|e| counts[e.label.as_str()] >= min_count)
        .cloned()
        .collect();
    LabeledCorpus::new(kept)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSplit {
    pub train: LabeledCorpus,
    pub dev: LabeledCorpus,
    pub test: LabeledCorpus,
}

/// Routes each example to the split owning its label. The label sets must
/// be pairwise disjoint and name only labels present in the corpus;
/// examples whose label belongs to no split are dropped.
pub fn split_labels(
    corpus: &LabeledCorpus,
    train: &BTreeSet<String>,
    dev: &BTreeSet<String>,
    test: &BTreeSet<String>,
) -> Result<LabelSplit> {
    let pairs = [("train", train, "dev", dev), ("train", train, "test", test), ("dev", dev, "test", test)];
    for (an, a, bn, b) in pairs {
        let overlap: Vec<&str> = a.intersection(b).map(String::as_str).collect();
        if !overlap.is_empty() {
            return Err(Error::Config(format!(
                "{an} and {bn} label sets overlap: {}",
                overlap.join(", ")
            )));
        }
    }
    let unknown: Vec<&str> = train
        .iter()
        .chain(dev)
        .chain(test)
        .filter(|l| !corpus.labels.contains(*l))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "labels not present in corpus: {}",
            unknown.join(", ")
        )));
    }
    let pick = |set: &BTreeSet<String>| {
        LabeledCorpus::new(corpus.examples.iter().filter(|e| set.contains(&e.label)).cloned().collect())
    };
    Ok(LabelSplit {
        train: pick(train),
        dev: pick(dev),
        test: pick(test),
    })
}
