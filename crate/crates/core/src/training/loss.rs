//! Episode losses: the query negative log-likelihood, the leave-out
//! auxiliary loss over the support set and their weighted sum.

use crate::corpus::{EventExample, Vocabulary};
use crate::episodes::{partition_support, Episode, SupportPartition};
use crate::error::Result;
use crate::model::{encode_batch, Bound, ClassSupport, Head, HeadConfig, Model, ModelConfig, ModelParams};
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::SeedRng;

/// All encodings of one episode as rows of a single matrix: class 0's
/// support first, then class 1's and so on, then the queries in order.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeEncodings<'t> {
    pub rows: Var<'t>,
    pub k_shot: usize,
    pub n_way: usize,
}

impl<'t> EpisodeEncodings<'t> {
    pub fn support_row(&self, class: usize, shot: usize) -> usize {
        class * self.k_shot + shot
    }

    pub fn query_row(&self, i: usize) -> usize {
        self.n_way * self.k_shot + i
    }

    fn class(&self, rows: impl Iterator<Item = usize>) -> Result<ClassSupport<'t>> {
        let rows: Vec<usize> = rows.collect();
        ClassSupport::from_stacked(self.rows.gather_rows(&rows)?)
    }
}

/// Encodes support and query examples of `episode` in one batch.
pub fn encode_episode<'t>(
    bound: &Bound<'t, '_>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    episode: &Episode,
) -> Result<EpisodeEncodings<'t>> {
    let examples: Vec<&EventExample> = episode
        .support
        .iter()
        .flatten()
        .map(|s| &s.example)
        .chain(episode.query.iter().map(|q| &q.shot.example))
        .collect();
    Ok(EpisodeEncodings {
        rows: encode_batch(bound, &config.encoder, vocab, &examples)?,
        k_shot: episode.k_shot(),
        n_way: episode.n_way(),
    })
}

/// `-log P(y = target | query)` for every `(query, target)` pair.
pub fn nll_terms<'t>(head: &Head<'t>, classes: &[ClassSupport<'t>], queries: &[(Var<'t>, usize)]) -> Result<Vec<Var<'t>>> {
    queries
        .iter()
        .map(|&(q, target)| {
            let prototypes = head.prototypes(classes, q)?;
            head.scores(q, &prototypes)?.softmax_neglogprob(target)
        })
        .collect()
}

/// Mean query NLL against prototypes from the full support set.
pub fn query_loss<'t>(head: &Head<'t>, enc: &EpisodeEncodings<'t>, episode: &Episode) -> Result<Var<'t>> {
    let classes = (0..enc.n_way)
        .map(|c| enc.class((0..enc.k_shot).map(|j| enc.support_row(c, j))))
        .collect::<Result<Vec<_>>>()?;
    let queries = episode
        .query
        .iter()
        .enumerate()
        .map(|(i, item)| Ok((enc.rows.row(enc.query_row(i))?, item.class)))
        .collect::<Result<Vec<_>>>()?;
    let terms = nll_terms(head, &classes, &queries)?;
    Ok(enc.rows.tape().stack(&terms)?.mean())
}

/// NLL of every auxiliary query against prototypes built from the
/// auxiliary support only, summed.
pub fn aux_loss<'t>(head: &Head<'t>, enc: &EpisodeEncodings<'t>, partition: &SupportPartition) -> Result<Var<'t>> {
    let classes = partition
        .aux_support
        .iter()
        .enumerate()
        .map(|(c, shots)| enc.class(shots.iter().map(|&j| enc.support_row(c, j))))
        .collect::<Result<Vec<_>>>()?;
    let mut queries = Vec::new();
    for (c, shots) in partition.aux_query.iter().enumerate() {
        for &j in shots {
            queries.push((enc.rows.row(enc.support_row(c, j))?, c));
        }
    }
    let terms = nll_terms(head, &classes, &queries)?;
    Ok(enc.rows.tape().stack(&terms)?.sum())
}

/// The three losses of one episode on a shared tape.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss<'t> {
    pub query: Var<'t>,
    pub aux: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// `L_query + λ·L_aux`. With `λ = 0` or no partition the auxiliary term
/// is never built and `total` is the query loss node itself.
pub fn episode_loss<'t>(
    bound: &Bound<'t, '_>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    episode: &Episode,
    partition: Option<&SupportPartition>,
    lambda: f64,
) -> Result<EpisodeLoss<'t>> {
    let head = Head::bind(&config.head, bound)?;
    let enc = encode_episode(bound, config, vocab, episode)?;
    let query = query_loss(&head, &enc, episode)?;
    match partition {
        Some(p) if lambda != 0.0 => {
            p.validate_against(episode)?;
            let aux = aux_loss(&head, &enc, p)?;
            Ok(EpisodeLoss {
                query,
                aux: Some(aux),
                total: query.add(aux.scale(lambda))?,
            })
        }
        _ => Ok(EpisodeLoss {
            query,
            aux: None,
            total: query,
        }),
    }
}

/// Query loss of `episode` under `model`.
pub fn loss_query(model: &Model, episode: &Episode) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.params);
    let head = Head::bind(&model.config.head, &bound)?;
    let enc = encode_episode(&bound, &model.config, &model.vocab, episode)?;
    Ok(query_loss(&head, &enc, episode)?.item())
}

/// Auxiliary loss of `episode` for a given support partition.
pub fn loss_aux(model: &Model, episode: &Episode, partition: &SupportPartition) -> Result<f64> {
    partition.validate_against(episode)?;
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.params);
    let head = Head::bind(&model.config.head, &bound)?;
    let enc = encode_episode(&bound, &model.config, &model.vocab, episode)?;
    Ok(aux_loss(&head, &enc, partition)?.item())
}

/// Draws a fresh partition with `q_aux` auxiliary queries per class and
/// returns `L_query + λ·L_aux`.
pub fn loss_total(model: &Model, episode: &Episode, q_aux: usize, lambda: f64, rng: &mut SeedRng) -> Result<f64> {
    let partition = partition_support(episode, q_aux, rng)?;
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.params);
    Ok(episode_loss(&bound, &model.config, &model.vocab, episode, Some(&partition), lambda)?
        .total
        .item())
}

fn constant_classes<'t>(tape: &'t Tape, support: &[Vec<Tensor>]) -> Result<Vec<ClassSupport<'t>>> {
    support
        .iter()
        .map(|class| ClassSupport::new(&class.iter().map(|t| tape.constant(t)).collect::<Vec<_>>()))
        .collect()
}

fn head_for<'t>(tape: &'t Tape, head: &HeadConfig, relation: Option<&ModelParams>) -> Result<Head<'t>> {
    match relation {
        Some(p) => Head::bind(head, &Bound::frozen(tape, p)),
        None => Head::parameter_free(head),
    }
}

/// Query loss computed directly from encodings: `support[c]` holds class
/// `c`'s support encodings, `queries` pairs encodings with true classes.
pub fn query_loss_from_encodings(
    head: &HeadConfig,
    relation: Option<&ModelParams>,
    support: &[Vec<Tensor>],
    queries: &[(Tensor, usize)],
) -> Result<f64> {
    let tape = Tape::new();
    let h = head_for(&tape, head, relation)?;
    let classes = constant_classes(&tape, support)?;
    let qs: Vec<_> = queries.iter().map(|(t, c)| (tape.constant(t), *c)).collect();
    let terms = nll_terms(&h, &classes, &qs)?;
    Ok(tape.stack(&terms)?.mean().item())
}

/// Auxiliary loss computed directly from support encodings.
pub fn aux_loss_from_encodings(
    head: &HeadConfig,
    relation: Option<&ModelParams>,
    support: &[Vec<Tensor>],
    partition: &SupportPartition,
) -> Result<f64> {
    let pick = |rows: &Vec<Vec<usize>>| -> Vec<Vec<Tensor>> {
        rows.iter()
            .enumerate()
            .map(|(c, js)| js.iter().map(|&j| support[c][j].clone()).collect())
            .collect()
    };
    let aux_support = pick(&partition.aux_support);
    let tape = Tape::new();
    let h = head_for(&tape, head, relation)?;
    let classes = constant_classes(&tape, &aux_support)?;
    let qs: Vec<_> = pick(&partition.aux_query)
        .into_iter()
        .enumerate()
        .flat_map(|(c, ts)| ts.into_iter().map(move |t| (t, c)))
        .map(|(t, c)| (tape.constant(&t), c))
        .collect();
    let terms = nll_terms(&h, &classes, &qs)?;
    Ok(tape.stack(&terms)?.sum().item())
}
