//! JSON checkpoints: `{format_version, config, vocab, params: {name: {shape, values}}}`.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! reloaded model is bitwise identical to the saved one.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::Model;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    params: BTreeMap<String, StoredTensor>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            params: self
                .params
                .iter()
                .map(|(name, t)| {
                    let stored = StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    };
                    (name.clone(), stored)
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.config.validate()?;
        let vocab = Vocabulary::from_words(ckpt.vocab)?;
        let mut params = ModelParams::new();
        for (name, stored) in ckpt.params {
            if stored.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("checkpoint parameter {name} is not finite")));
            }
            params.insert(name, Tensor::new(stored.shape, stored.values)?.trainable())?;
        }
        Ok(Self {
            config: ckpt.config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
