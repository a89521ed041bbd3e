//! Trigger-aware instance encoders.
//!
//! Token `i` of a sentence with trigger `a` is the concatenation of its
//! word embedding and the embedding of the clipped offset `i − a`. The CNN
//! encoder max-pools a windowed convolution over the sentence; the
//! Transformer encoder projects tokens to the model width, runs
//! self-attention blocks over the sentence and returns the hidden state at
//! the trigger.

use super::config::{EncoderConfig, EncoderKind};
use super::params::{glorot, ones, zeros, Bound, ModelParams, POSITION_EMBEDDINGS, WORD_EMBEDDINGS};
use crate::corpus::{position_row, EventExample, Vocabulary};
use crate::error::Result;
use crate::numkernel::{multi_head_self_attention, AttentionParams, Var};
use crate::rng::SeedRng;

pub(crate) fn init_encoder(config: &EncoderConfig, params: &mut ModelParams, rng: &mut SeedRng) -> Result<()> {
    let d_in = config.token_dim();
    match config.kind {
        EncoderKind::Cnn => {
            params.insert("cnn.filters", glorot(config.cnn_window * d_in, config.cnn_filters, rng))?;
            params.insert("cnn.bias", zeros(config.cnn_filters))?;
        }
        EncoderKind::Transformer => {
            let d = config.tf_dim;
            params.insert("tf.input.weight", glorot(d_in, d, rng))?;
            params.insert("tf.input.bias", zeros(d))?;
            for l in 0..config.tf_layers {
                for proj in ["query", "key", "value", "output"] {
                    params.insert(format!("tf.{l}.attn.{proj}.weight"), glorot(d, d, rng))?;
                    params.insert(format!("tf.{l}.attn.{proj}.bias"), zeros(d))?;
                }
                params.insert(format!("tf.{l}.norm1.gain"), ones(d))?;
                params.insert(format!("tf.{l}.norm1.bias"), zeros(d))?;
                params.insert(format!("tf.{l}.ffn.w1"), glorot(d, config.tf_ff_dim, rng))?;
                params.insert(format!("tf.{l}.ffn.b1"), zeros(config.tf_ff_dim))?;
                params.insert(format!("tf.{l}.ffn.w2"), glorot(config.tf_ff_dim, d, rng))?;
                params.insert(format!("tf.{l}.ffn.b2"), zeros(d))?;
                params.insert(format!("tf.{l}.norm2.gain"), ones(d))?;
                params.insert(format!("tf.{l}.norm2.bias"), zeros(d))?;
            }
        }
    }
    Ok(())
}

/// Token vectors of all examples stacked row-wise, with per-example lengths.
fn token_inputs<'t>(
    bound: &Bound<'t, '_>,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    examples: &[&EventExample],
) -> Result<(Var<'t>, Vec<usize>)> {
    let mut word_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut lengths = Vec::with_capacity(examples.len());
    for ex in examples {
        for (i, tok) in ex.tokens.iter().enumerate() {
            word_ids.push(vocab.lookup(tok));
            pos_ids.push(position_row(i, ex.trigger, config.max_pos_dist));
        }
        lengths.push(ex.tokens.len());
    }
    let words = bound.get(WORD_EMBEDDINGS)?.gather_rows(&word_ids)?;
    let positions = bound.get(POSITION_EMBEDDINGS)?.gather_rows(&pos_ids)?;
    Ok((bound.tape().concat(&[words, positions])?, lengths))
}

/// Encodes every example; row `i` of the result is the encoding of
/// `examples[i]`.
pub fn encode_batch<'t>(
    bound: &Bound<'t, '_>,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    examples: &[&EventExample],
) -> Result<Var<'t>> {
    let (tokens, lengths) = token_inputs(bound, config, vocab, examples)?;
    match config.kind {
        EncoderKind::Cnn => bound.tape().conv1d_maxpool_segments(
            tokens,
            &lengths,
            bound.get("cnn.filters")?,
            bound.get("cnn.bias")?,
            config.cnn_window,
        ),
        EncoderKind::Transformer => {
            let mut hidden = tokens
                .matmul(bound.get("tf.input.weight")?)?
                .add_row(bound.get("tf.input.bias")?)?;
            for l in 0..config.tf_layers {
                hidden = transformer_block(bound, config, l, hidden, &lengths)?;
            }
            let mut offset = 0;
            let triggers: Vec<usize> = examples
                .iter()
                .zip(&lengths)
                .map(|(ex, &len)| {
                    let row = offset + ex.trigger;
                    offset += len;
                    row
                })
                .collect();
            hidden.gather_rows(&triggers)
        }
    }
}

pub fn encode<'t>(
    bound: &Bound<'t, '_>,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    example: &EventExample,
) -> Result<Var<'t>> {
    encode_batch(bound, config, vocab, &[example])?.row(0)
}

fn transformer_block<'t>(
    bound: &Bound<'t, '_>,
    config: &EncoderConfig,
    layer: usize,
    hidden: Var<'t>,
    lengths: &[usize],
) -> Result<Var<'t>> {
    let p = |name: &str| bound.get(&format!("tf.{layer}.{name}"));
    let attn = AttentionParams {
        query: p("attn.query.weight")?,
        query_bias: p("attn.query.bias")?,
        key: p("attn.key.weight")?,
        key_bias: p("attn.key.bias")?,
        value: p("attn.value.weight")?,
        value_bias: p("attn.value.bias")?,
        output: p("attn.output.weight")?,
        output_bias: p("attn.output.bias")?,
    };
    // attention never crosses sentence boundaries
    let mut parts = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for &len in lengths {
        let rows: Vec<usize> = (offset..offset + len).collect();
        let sentence = hidden.gather_rows(&rows)?;
        parts.push(multi_head_self_attention(sentence, &attn, config.tf_heads)?.output);
        offset += len;
    }
    let attended = bound.tape().concat_rows(&parts)?;
    let x = hidden
        .add(attended)?
        .layer_norm()?
        .mul_row(p("norm1.gain")?)?
        .add_row(p("norm1.bias")?)?;
    let ff = x
        .matmul(p("ffn.w1")?)?
        .add_row(p("ffn.b1")?)?
        .relu()
        .matmul(p("ffn.w2")?)?
        .add_row(p("ffn.b2")?)?;
    x.add(ff)?
        .layer_norm()?
        .mul_row(p("norm2.gain")?)?
        .add_row(p("norm2.bias")?)
}
