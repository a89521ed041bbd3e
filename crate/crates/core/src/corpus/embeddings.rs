use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::rng::SeedRng;

/// Half-width of the uniform initialization for rows without a pretrained
/// vector.
pub const EMBEDDING_INIT_RANGE: f64 = 0.25;

/// Word and trigger-relative position lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `[V × word_dim]`
    pub words: Tensor,
    /// `[(2·max_dist + 1) × pos_dim]`
    pub positions: Tensor,
    pub max_dist: usize,
}

impl EmbeddingTable {
    pub fn new(words: Tensor, pos_dim: usize, max_dist: usize, rng: &mut SeedRng) -> Self {
        let rows = 2 * max_dist + 1;
        let data = (0..rows * pos_dim)
            .map(|_| rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE))
            .collect();
        let positions = Tensor::new(vec![rows, pos_dim], data).expect("position table").trainable();
        Self {
            words,
            positions,
            max_dist,
        }
    }

    /// Row of the position table for token `i` relative to trigger `a`.
    pub fn position_row(&self, token: usize, trigger: usize) -> usize {
        position_row(token, trigger, self.max_dist)
    }
}

pub fn position_row(token: usize, trigger: usize, max_dist: usize) -> usize {
    let offset = token as isize - trigger as isize;
    let clipped = offset.clamp(-(max_dist as isize), max_dist as isize);
    (clipped + max_dist as isize) as usize
}

fn init_row(rng: &mut SeedRng, dim: usize) -> impl Iterator<Item = f64> + '_ {
    (0..dim).map(move |_| rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE))
}

/// Randomly initialized trainable word table; the padding row is zero.
pub fn random_word_table(vocab: &Vocabulary, dim: usize, rng: &mut SeedRng) -> Tensor {
    let mut data = Vec::with_capacity(vocab.len() * dim);
    data.extend(std::iter::repeat(0.0).take(dim));
    for _ in 1..vocab.len() {
        data.extend(init_row(rng, dim));
    }
    Tensor::new(vec![vocab.len(), dim], data).expect("word table").trainable()
}

/// Loads pretrained vectors for `vocab` from a whitespace-separated text
/// file (`word v1 … v_dim` per line; an optional `count dim` header line is
/// accepted). Words are matched exactly first, then by their lowercase form.
/// Rows with no match, including the unknown token, are drawn uniformly from
/// `[-0.25, 0.25]` in vocabulary order; the padding row is zero.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, dim: usize, rng: &mut SeedRng) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut wanted: HashMap<String, Option<Vec<f64>>> = HashMap::new();
    for w in vocab.words().iter().skip(2) {
        wanted.insert(w.clone(), None);
        wanted.entry(w.to_lowercase()).or_insert(None);
    }

    let mut first_data_line = true;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if line_no == 1 && rest.len() == 1 && word.parse::<usize>().is_ok() {
            // word2vec-style header
            if let Ok(d) = rest[0].parse::<usize>() {
                if d != dim {
                    return Err(Error::Config(format!("embedding file has dimension {d}, expected {dim}")));
                }
                continue;
            }
        }
        if rest.len() != dim {
            if first_data_line {
                return Err(Error::Config(format!(
                    "embedding file has dimension {}, expected {dim}",
                    rest.len()
                )));
            }
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", rest.len()),
            });
        }
        first_data_line = false;
        if let Some(slot) = wanted.get_mut(word) {
            if slot.is_none() {
                let values = rest
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                *slot = Some(values);
            }
        }
    }

    let mut data = Vec::with_capacity(vocab.len() * dim);
    data.extend(std::iter::repeat(0.0).take(dim));
    data.extend(init_row(rng, dim));
    for w in vocab.words().iter().skip(2) {
        let found = wanted
            .get(w)
            .and_then(Option::as_ref)
            .or_else(|| wanted.get(&w.to_lowercase()).and_then(Option::as_ref));
        match found {
            Some(v) => data.extend_from_slice(v),
            None => data.extend(init_row(rng, dim)),
        }
    }
    Ok(Tensor::new(vec![vocab.len(), dim], data)?.trainable())
}
