//! Instance encoders, prototypes, distances and the episodic classifier.

pub mod checkpoint;
mod config;
pub mod encoder;
pub mod head;
mod params;

pub use config::{
    AttentionActivation, Distance, EncoderConfig, EncoderKind, HeadConfig, HeadKind, ModelConfig, PrototypeMode,
};
pub use encoder::{encode, encode_batch};
pub use head::{
    argmax, attention_prototype, classify, classify_distances, distance, mean_prototype, prototypes_attention,
    prototypes_mean, ClassSupport, Head,
};
pub use params::{Bound, ModelParams, POSITION_EMBEDDINGS, WORD_EMBEDDINGS};

use crate::corpus::{random_word_table, EmbeddingTable, EventExample, Vocabulary};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor};
use crate::rng::SeedRng;

/// Configuration, vocabulary and parameters: everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model around an existing `[V × word_dim]` word table. Position
    /// embeddings, encoder and head weights are drawn from `rng` in that
    /// order.
    pub fn new(config: ModelConfig, vocab: Vocabulary, word_table: Tensor, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let want = [vocab.len(), config.encoder.word_dim];
        if word_table.shape() != want {
            return Err(Error::Dimension {
                op: "word table",
                left: word_table.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        let table = EmbeddingTable::new(
            word_table.trainable(),
            config.encoder.pos_dim,
            config.encoder.max_pos_dist,
            rng,
        );
        let mut params = ModelParams::new();
        params.insert(WORD_EMBEDDINGS, table.words)?;
        params.insert(POSITION_EMBEDDINGS, table.positions)?;
        encoder::init_encoder(&config.encoder, &mut params, rng)?;
        head::init_head(&config.head, config.encoder.output_dim(), &mut params, rng)?;
        Ok(Self { config, vocab, params })
    }

    /// Fresh model with a randomly initialized word table.
    pub fn random(config: ModelConfig, vocab: Vocabulary, rng: &mut SeedRng) -> Result<Self> {
        let words = random_word_table(&vocab, config.encoder.word_dim, rng);
        Self::new(config, vocab, words, rng)
    }

    /// Encodings of `examples` as rows, with parameters frozen.
    pub fn encode_all(&self, examples: &[&EventExample]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &self.params);
        let enc = encode_batch(&bound, &self.config.encoder, &self.vocab, examples)?.value();
        let d = enc.shape()[1];
        Ok(enc.data().chunks(d).map(|r| Tensor::vector(r.to_vec())).collect())
    }

    /// Relation weights when the head needs them.
    pub fn relation_params(&self) -> Option<&ModelParams> {
        (self.config.head.kind == HeadKind::Relation).then_some(&self.params)
    }
}
