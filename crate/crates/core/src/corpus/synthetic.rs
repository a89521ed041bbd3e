use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EventExample, LabeledCorpus};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Parameters of a synthetic event corpus.
///
/// Label `i` owns `signatures_per_label` trigger words. Each example is a
/// sentence of filler words with a trigger slot that holds one of its
/// label's signature words with probability `signal_strength`, and a
/// random filler word otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub examples_per_label: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub signal_strength: f64,
    pub signatures_per_label: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_labels: 30,
            examples_per_label: 50,
            vocab_size: 2000,
            min_len: 6,
            max_len: 14,
            signal_strength: 1.0,
            signatures_per_label: 1,
            seed: 7,
        }
    }
}

pub fn label_name(i: usize) -> String {
    format!("event_{i:03}")
}

fn word(i: usize) -> String {
    format!("w{i:05}")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledCorpus> {
    let counts = [
        ("num_labels", spec.num_labels),
        ("examples_per_label", spec.examples_per_label),
        ("vocab_size", spec.vocab_size),
        ("min_len", spec.min_len),
        ("signatures_per_label", spec.signatures_per_label),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    if spec.max_len < spec.min_len {
        return Err(Error::Config("max_len must be at least min_len".into()));
    }
    if !(0.0..=1.0).contains(&spec.signal_strength) {
        return Err(Error::Config(format!(
            "signal_strength {} outside [0, 1]",
            spec.signal_strength
        )));
    }
    let reserved = spec.num_labels * spec.signatures_per_label;
    if spec.vocab_size < reserved {
        return Err(Error::Config(format!(
            "vocab_size {} cannot hold {} labels × {} signature words",
            spec.vocab_size, spec.num_labels, spec.signatures_per_label
        )));
    }
    // filler words are the non-signature part of the vocabulary, or all of
    // it when every word is a signature
    let filler = if reserved < spec.vocab_size { reserved..spec.vocab_size } else { 0..spec.vocab_size };

    let mut rng = SeedRng::new(spec.seed);
    let mut examples = Vec::with_capacity(spec.num_labels * spec.examples_per_label);
    for label in 0..spec.num_labels {
        let name = label_name(label);
        for _ in 0..spec.examples_per_label {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut tokens: Vec<String> = (0..len).map(|_| word(rng.gen_range(filler.clone()))).collect();
            let trigger = rng.gen_range(0..len);
            tokens[trigger] = if rng.gen_bool(spec.signal_strength) {
                word(label * spec.signatures_per_label + rng.gen_range(0..spec.signatures_per_label))
            } else {
                word(rng.gen_range(filler.clone()))
            };
            examples.push(EventExample {
                tokens,
                trigger,
                label: name.clone(),
            });
        }
    }
    Ok(LabeledCorpus::new(examples))
}

/// Signature words owned by label index `label`.
pub fn signature_words(spec: &SyntheticSpec, label: usize) -> Vec<String> {
    (0..spec.signatures_per_label)
        .map(|j| word(label * spec.signatures_per_label + j))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_signal_triggers_are_signatures() {
        let spec = SyntheticSpec {
            num_labels: 5,
            examples_per_label: 20,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        for e in c.examples() {
            let label: usize = e.label["event_".len()..].parse().unwrap();
            assert!(signature_words(&spec, label).contains(&e.trigger_word().to_string()));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SyntheticSpec {
            signal_strength: 0.6,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn counts() {
        let spec = SyntheticSpec {
            num_labels: 28,
            examples_per_label: 50,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.len(), 1400);
        assert_eq!(c.labels().len(), 28);
    }

    #[test]
    fn vocabulary_too_small() {
        let spec = SyntheticSpec {
            num_labels: 10,
            vocab_size: 9,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }
}
