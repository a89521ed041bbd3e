//! Prototype construction, distances and the episodic classifier.
//!
//! The classifier turns distances into a distribution over the episode's
//! classes: `P(y = i | q) = exp(−d(q, c_i)) / Σ_j exp(−d(q, c_j))`.

use super::config::{AttentionActivation, Distance, HeadConfig, HeadKind, PrototypeMode};
use super::params::{glorot, zeros, Bound, ModelParams};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::SeedRng;

pub(crate) fn init_head(config: &HeadConfig, enc_dim: usize, params: &mut ModelParams, rng: &mut SeedRng) -> Result<()> {
    if config.kind == HeadKind::Relation {
        params.insert("relation.w1", glorot(2 * enc_dim, config.relation_hidden, rng))?;
        params.insert("relation.b1", zeros(config.relation_hidden))?;
        params.insert("relation.w2", glorot(config.relation_hidden, 1, rng))?;
        params.insert("relation.b2", zeros(1))?;
    }
    Ok(())
}

/// Weights of the learned comparator `sigmoid(relu([a; b]·W1 + b1)·W2 + b2)`.
#[derive(Debug, Clone, Copy)]
pub struct RelationParams<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> RelationParams<'t> {
    pub fn bind(bound: &Bound<'t, '_>) -> Result<Self> {
        Ok(Self {
            w1: bound.get("relation.w1")?,
            b1: bound.get("relation.b1")?,
            w2: bound.get("relation.w2")?,
            b2: bound.get("relation.b2")?,
        })
    }

    /// Relation score in (0, 1).
    pub fn score(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let pair = a.tape().concat(&[a, b])?;
        let width = pair.shape()[0];
        pair.reshape(&[1, width])?
            .matmul(self.w1)?
            .add_row(self.b1)?
            .relu()
            .matmul(self.w2)?
            .add_row(self.b2)?
            .reshape(&[])
            .map(Var::sigmoid)
    }
}

/// A head bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct Head<'t> {
    pub distance: Distance,
    pub prototype: PrototypeMode,
    pub activation: AttentionActivation,
    pub relation: Option<RelationParams<'t>>,
}

impl<'t> Head<'t> {
    pub fn bind(config: &HeadConfig, bound: &Bound<'t, '_>) -> Result<Self> {
        let relation = match config.distance() {
            Distance::Relation => Some(RelationParams::bind(bound)?),
            _ => None,
        };
        Ok(Self {
            distance: config.distance(),
            prototype: config.prototype(),
            activation: config.attention_activation,
            relation,
        })
    }

    /// Head without learned parameters (any kind except relation).
    pub fn parameter_free(config: &HeadConfig) -> Result<Self> {
        if config.distance() == Distance::Relation {
            return Err(Error::Config("relation head needs bound parameters".into()));
        }
        Ok(Self {
            distance: config.distance(),
            prototype: config.prototype(),
            activation: config.attention_activation,
            relation: None,
        })
    }

    pub fn distance(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        match self.distance {
            Distance::Euclidean => a.sq_euclidean(b),
            Distance::Cosine => Ok(a.cosine(b)?.affine(-1.0, 1.0)),
            Distance::Relation => {
                let rel = self
                    .relation
                    .as_ref()
                    .ok_or_else(|| Error::Config("relation distance without relation parameters".into()))?;
                Ok(rel.score(a, b)?.affine(-1.0, 1.0))
            }
        }
    }

    /// Negated distances from `query` to every prototype: the classifier
    /// logits.
    pub fn scores(&self, query: Var<'t>, prototypes: &[Var<'t>]) -> Result<Var<'t>> {
        if prototypes.len() < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 prototypes, got {}",
                prototypes.len()
            )));
        }
        let neg: Vec<Var<'t>> = prototypes
            .iter()
            .map(|c| self.distance(query, *c).map(|d| d.scale(-1.0)))
            .collect::<Result<_>>()?;
        query.tape().stack(&neg)
    }

    /// Per-class prototypes for `query`. Mean prototypes ignore the query.
    pub fn prototypes(&self, classes: &[ClassSupport<'t>], query: Var<'t>) -> Result<Vec<Var<'t>>> {
        classes
            .iter()
            .map(|c| match self.prototype {
                PrototypeMode::Mean => Ok(c.mean),
                PrototypeMode::HybridAttention => attention_prototype(c.stacked, query, self.activation),
            })
            .collect()
    }
}

/// Support encodings of one class, stacked once and shared by every query.
#[derive(Debug, Clone, Copy)]
pub struct ClassSupport<'t> {
    /// `[K × d]`
    pub stacked: Var<'t>,
    /// `[d]`
    pub mean: Var<'t>,
}

impl<'t> ClassSupport<'t> {
    pub fn new(encodings: &[Var<'t>]) -> Result<Self> {
        let first = encodings.first().ok_or(Error::EmptySequence { op: "prototype" })?;
        Self::from_stacked(first.tape().stack(encodings)?)
    }

    /// From a `[K × d]` matrix of encodings.
    pub fn from_stacked(stacked: Var<'t>) -> Result<Self> {
        Ok(Self {
            stacked,
            mean: stacked.mean_axis(0)?,
        })
    }
}

/// Mean of a class's support encodings.
pub fn mean_prototype<'t>(encodings: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(ClassSupport::new(encodings)?.mean)
}

/// Query-conditioned weighted sum of the rows of `stacked` (`[K × d]`):
/// `b_j = Σ_dim act(s_j ⊙ q)`, `α = softmax(b)`, `c = Σ_j α_j s_j`.
pub fn attention_prototype<'t>(stacked: Var<'t>, query: Var<'t>, activation: AttentionActivation) -> Result<Var<'t>> {
    let products = stacked.mul_row(query)?;
    let squashed = match activation {
        AttentionActivation::Tanh => products.tanh(),
        AttentionActivation::Identity => products,
    };
    let k = stacked.shape()[0];
    let d = stacked.shape()[1];
    let alpha = squashed.sum_axis(1)?.softmax()?;
    alpha.reshape(&[1, k])?.matmul(stacked)?.reshape(&[d])
}

/// Attention weights of [`attention_prototype`], for inspection.
pub fn attention_weights(support: &[Tensor], query: &Tensor, activation: AttentionActivation) -> Vec<f64> {
    let mut b: Vec<f64> = support
        .iter()
        .map(|s| s.data().iter().zip(query.data()).map(|(x, y)| activation.apply(x * y)).sum())
        .collect();
    crate::numkernel::softmax_in_place(&mut b);
    b
}

fn constants<'t>(tape: &'t Tape, tensors: &[Tensor]) -> Vec<Var<'t>> {
    tensors.iter().map(|t| tape.constant(t)).collect()
}

/// Mean prototype of every class. Fails on an empty class.
pub fn prototypes_mean(support: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    support
        .iter()
        .map(|class| mean_prototype(&constants(&tape, class)).map(|v| v.value()))
        .collect()
}

/// Attention prototype of every class for one query encoding.
pub fn prototypes_attention(support: &[Vec<Tensor>], query: &Tensor, activation: AttentionActivation) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let q = tape.constant(query);
    support
        .iter()
        .map(|class| {
            let cs = ClassSupport::new(&constants(&tape, class))?;
            attention_prototype(cs.stacked, q, activation).map(|v| v.value())
        })
        .collect()
}

/// Distance between two encodings. `relation` must hold the relation
/// weights when the head is a relation head.
pub fn distance(a: &Tensor, b: &Tensor, head: &HeadConfig, relation: Option<&ModelParams>) -> Result<f64> {
    let tape = Tape::new();
    let bound = relation.map(|p| Bound::frozen(&tape, p));
    let h = match &bound {
        Some(b) => Head::bind(head, b)?,
        None => Head::parameter_free(head)?,
    };
    Ok(h.distance(tape.constant(a), tape.constant(b))?.item())
}

/// Class distribution of `query` against prototypes ordered by class index.
pub fn classify(query: &Tensor, prototypes: &[Tensor], head: &HeadConfig, relation: Option<&ModelParams>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = relation.map(|p| Bound::frozen(&tape, p));
    let h = match &bound {
        Some(b) => Head::bind(head, b)?,
        None => Head::parameter_free(head)?,
    };
    let scores = h.scores(tape.constant(query), &constants(&tape, prototypes))?;
    Ok(scores.softmax()?.data().to_vec())
}

/// Softmax of negated distances.
pub fn classify_distances(distances: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = distances.iter().map(|d| -d).collect();
    crate::numkernel::softmax_in_place(&mut p);
    p
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
