use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_rare_labels, generate_synthetic, load_embeddings, load_jsonl, random_word_table, split_labels, LabelSplit,
    LabeledCorpus, SyntheticSpec, Vocabulary,
};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderKind, HeadConfig, HeadKind, Model, ModelConfig};
use crate::rng::SeedRng;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSONL corpus; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Labels with fewer examples are dropped before splitting.
    pub min_count: usize,
    pub train_labels: Vec<String>,
    pub dev_labels: Vec<String>,
    pub test_labels: Vec<String>,
    /// Train/dev/test label counts taken in sorted label order when the
    /// three label lists are all empty.
    pub split: [usize; 3],
    /// Pretrained word vectors (text format); random otherwise.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic: SyntheticSpec::default(),
            min_count: 15,
            train_labels: Vec::new(),
            dev_labels: Vec::new(),
            test_labels: Vec::new(),
            split: [20, 5, 5],
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub heads: Vec<HeadKind>,
    pub encoders: Vec<EncoderKind>,
    /// `[n_way, k_shot]` pairs.
    pub shots: Vec<[usize; 2]>,
    pub lolos: Vec<bool>,
    pub noise_rates: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            heads: vec![HeadKind::Proto, HeadKind::ProtoAtt],
            encoders: vec![EncoderKind::Cnn],
            shots: vec![[5, 5], [10, 10]],
            lolos: vec![false, true],
            noise_rates: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub grid: GridConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            q_query: 5,
            episodes: 1000,
            seed: 0,
            grid: GridConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_query)
    }
}

/// One run's configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let spec = self.eval.spec()?;
        self.train.validate(spec.k_shot)
    }
}

/// Corpora split by label plus the vocabulary over all of them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: LabelSplit,
    pub vocab: Vocabulary,
}

/// The corpus named by `data`, or the synthetic one it describes.
pub fn load_corpus(data: &DataConfig) -> Result<LabeledCorpus> {
    match &data.corpus {
        Some(path) => load_jsonl(path),
        None => generate_synthetic(&data.synthetic),
    }
}

pub fn prepare_data(data: &DataConfig) -> Result<PreparedData> {
    let corpus = filter_rare_labels(&load_corpus(data)?, data.min_count.max(1));
    let lists = [&data.train_labels, &data.dev_labels, &data.test_labels];
    let [train, dev, test]: [BTreeSet<String>; 3] = if lists.iter().all(|l| l.is_empty()) {
        let labels: Vec<&String> = corpus.labels().iter().collect();
        let needed: usize = data.split.iter().sum();
        if labels.len() < needed {
            return Err(Error::Sampling(format!(
                "label split {:?} needs {needed} labels with at least {} examples, corpus has {}",
                data.split,
                data.min_count,
                labels.len()
            )));
        }
        let mut it = labels.into_iter().cloned();
        data.split.map(|n| it.by_ref().take(n).collect())
    } else {
        // labels removed by the rare-label filter are skipped
        lists.map(|l| l.iter().filter(|x| corpus.labels().contains(*x)).cloned().collect())
    };
    let splits = split_labels(&corpus, &train, &dev, &test)?;
    let vocab = Vocabulary::from_corpora([&splits.train, &splits.dev, &splits.test]);
    Ok(PreparedData { splits, vocab })
}

/// Freshly initialized model for `config` over `vocab`, seeded from
/// `config.train.seed`.
pub fn init_model(config: &RunConfig, vocab: &Vocabulary) -> Result<Model> {
    let root = SeedRng::new(config.train.seed);
    let mut emb_rng = root.split("embeddings", 0);
    let words = match &config.data.embeddings {
        Some(path) => load_embeddings(path, vocab, config.encoder.word_dim, &mut emb_rng)?,
        None => random_word_table(vocab, config.encoder.word_dim, &mut emb_rng),
    };
    Model::new(config.model(), vocab.clone(), words, &mut root.split("init", 0))
}
