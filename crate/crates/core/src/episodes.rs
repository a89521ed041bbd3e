//! N-way K-shot episode sampling, support-set partitioning for the
//! leave-out loss, and query label perturbation.
//!
//! Every sampler takes the caller's [`SeedRng`] and is a pure function of
//! its inputs and that stream.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EventExample, LabeledCorpus};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Episode shape: `n_way` classes, `k_shot` support and `q_query` query
/// examples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self> {
        let spec = Self { n_way, k_shot, q_query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_query < 1 {
            return Err(Error::Config(format!(
                "episode needs n_way ≥ 2, k_shot ≥ 1, q_query ≥ 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }
}

/// A corpus example inside an episode, remembering its corpus position.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub id: usize,
    pub example: EventExample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub shot: Shot,
    /// Position of the (possibly perturbed) label in `label_universe`.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Class `i` is `label_universe[i]`.
    pub label_universe: Vec<String>,
    /// `support[i]` holds the K support examples of class `i`.
    pub support: Vec<Vec<Shot>>,
    pub query: Vec<QueryItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.label_universe.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Leave-out split of each class's support examples, as positions into
/// `Episode::support[class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportPartition {
    /// K − Q positions per class.
    pub aux_support: Vec<Vec<usize>>,
    /// Q positions per class.
    pub aux_query: Vec<Vec<usize>>,
}

impl SupportPartition {
    /// Checks that the partition splits every class of `episode` exactly.
    pub fn validate_against(&self, episode: &Episode) -> Result<()> {
        let n = episode.n_way();
        if self.aux_support.len() != n || self.aux_query.len() != n {
            return Err(Error::Config(format!(
                "partition covers {} classes, episode has {n}",
                self.aux_support.len()
            )));
        }
        for (c, (s, q)) in self.aux_support.iter().zip(&self.aux_query).enumerate() {
            let k = episode.support[c].len();
            let mut seen = vec![false; k];
            for &p in s.iter().chain(q) {
                if p >= k || seen[p] {
                    return Err(Error::Config(format!("partition of class {c} is not a split of its support")));
                }
                seen[p] = true;
            }
            if seen.iter().any(|x| !x) || s.is_empty() || q.is_empty() {
                return Err(Error::Config(format!("partition of class {c} is not a split of its support")));
            }
        }
        Ok(())
    }
}

/// Draws `spec.n_way` labels without replacement, then `k_shot + q_query`
/// distinct examples per label; the first `k_shot` become support.
pub fn sample_episode(corpus: &LabeledCorpus, spec: &EpisodeSpec, rng: &mut SeedRng) -> Result<Episode> {
    spec.validate()?;
    let by_label = corpus.indices_by_label();
    let labels: Vec<&str> = by_label.keys().copied().collect();
    if labels.len() < spec.n_way {
        return Err(Error::Sampling(format!(
            "{}-way episode needs {} labels, corpus has {}",
            spec.n_way,
            spec.n_way,
            labels.len()
        )));
    }
    let per_label = spec.k_shot + spec.q_query;
    if let Some((label, ids)) = by_label.iter().find(|(_, ids)| ids.len() < per_label) {
        return Err(Error::Sampling(format!(
            "label {label} has {} examples, episode needs {per_label}",
            ids.len()
        )));
    }

    let chosen = index::sample(rng, labels.len(), spec.n_way);
    let mut universe = Vec::with_capacity(spec.n_way);
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_query);
    for (class, li) in chosen.iter().enumerate() {
        let label = labels[li];
        let pool = &by_label[label];
        let picks = index::sample(rng, pool.len(), per_label);
        let shot = |j: usize| Shot {
            id: pool[j],
            example: corpus.examples()[pool[j]].clone(),
        };
        let mut picks = picks.iter();
        support.push(picks.by_ref().take(spec.k_shot).map(shot).collect());
        query.extend(picks.map(|j| QueryItem { shot: shot(j), class }));
        universe.push(label.to_string());
    }
    Ok(Episode {
        label_universe: universe,
        support,
        query,
    })
}

/// Training episode over `batch_classes` labels regardless of the
/// evaluation `n_way`.
pub fn sample_training_batch(
    corpus: &LabeledCorpus,
    spec: &EpisodeSpec,
    batch_classes: usize,
    rng: &mut SeedRng,
) -> Result<Episode> {
    if corpus.labels().len() < batch_classes {
        return Err(Error::Sampling(format!(
            "training batches draw {batch_classes} labels, training corpus has {}",
            corpus.labels().len()
        )));
    }
    let batch = EpisodeSpec {
        n_way: batch_classes,
        ..*spec
    };
    sample_episode(corpus, &batch, rng)
}

/// Moves `q_aux` uniformly chosen support examples of every class into the
/// auxiliary query set; the rest form the auxiliary support set.
pub fn partition_support(episode: &Episode, q_aux: usize, rng: &mut SeedRng) -> Result<SupportPartition> {
    let k = episode.k_shot();
    if q_aux < 1 || q_aux >= k {
        return Err(Error::Config(format!(
            "auxiliary query count must satisfy 1 ≤ Q < K (Q = {q_aux}, K = {k})"
        )));
    }
    let mut aux_support = Vec::with_capacity(episode.n_way());
    let mut aux_query = Vec::with_capacity(episode.n_way());
    for class in &episode.support {
        let n = class.len();
        let mut chosen = vec![false; n];
        let mut q: Vec<usize> = index::sample(rng, n, q_aux).into_vec();
        q.iter().for_each(|&p| chosen[p] = true);
        q.sort_unstable();
        aux_support.push((0..n).filter(|&p| !chosen[p]).collect());
        aux_query.push(q);
    }
    Ok(SupportPartition { aux_support, aux_query })
}

/// Number of query items a perturbation at `rate` touches.
pub fn perturbation_count(rate: f64, queries: usize) -> usize {
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999…
    ((rate * queries as f64) + 1e-9).floor() as usize
}

/// Replaces the class of exactly `floor(rate · |query|)` uniformly chosen
/// query items with a uniformly chosen different class. Support is left
/// alone.
pub fn perturb_labels(episode: &Episode, rate: f64, rng: &mut SeedRng) -> Result<Episode> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut out = episode.clone();
    let count = perturbation_count(rate, out.query.len());
    if count == 0 {
        return Ok(out);
    }
    let n = episode.n_way();
    for i in index::sample(rng, out.query.len(), count) {
        let item = &mut out.query[i];
        let r = rng.gen_range(0..n - 1);
        item.class = if r >= item.class { r + 1 } else { r };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn corpus(labels: usize, per_label: usize) -> LabeledCorpus {
        let mut v = Vec::new();
        for l in 0..labels {
            for i in 0..per_label {
                v.push(EventExample::new(vec![format!("t{l}_{i}")], 0, format!("L{l:02}")).unwrap());
            }
        }
        LabeledCorpus::new(v)
    }

    fn ids(ep: &Episode) -> (HashSet<usize>, HashSet<usize>) {
        let s = ep.support.iter().flatten().map(|s| s.id).collect();
        let q = ep.query.iter().map(|q| q.shot.id).collect();
        (s, q)
    }

    #[test]
    fn five_way_five_shot_shapes() {
        let c = corpus(8, 12);
        let spec = EpisodeSpec::new(5, 5, 5).unwrap();
        let ep = sample_episode(&c, &spec, &mut SeedRng::new(1)).unwrap();
        let (s, q) = ids(&ep);
        assert_eq!((s.len(), q.len()), (25, 25));
        assert!(s.is_disjoint(&q));
        for item in &ep.query {
            assert_eq!(item.shot.example.label, ep.label_universe[item.class]);
        }
        for (c, shots) in ep.support.iter().enumerate() {
            assert!(shots.iter().all(|s| s.example.label == ep.label_universe[c]));
        }
    }

    #[test]
    fn exhaustive_draw_uses_every_example_once() {
        let c = corpus(3, 4);
        let spec = EpisodeSpec::new(3, 2, 2).unwrap();
        let ep = sample_episode(&c, &spec, &mut SeedRng::new(9)).unwrap();
        let (s, q) = ids(&ep);
        let all: HashSet<usize> = s.union(&q).copied().collect();
        assert_eq!(all, (0..12).collect());
    }

    #[test]
    fn same_stream_same_episode() {
        let c = corpus(10, 15);
        let spec = EpisodeSpec::new(5, 5, 5).unwrap();
        let a = sample_episode(&c, &spec, &mut SeedRng::new(4)).unwrap();
        let b = sample_episode(&c, &spec, &mut SeedRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deficient_label_is_named() {
        let mut v = corpus(5, 10).examples().to_vec();
        v.truncate(45);
        let c = LabeledCorpus::new(v);
        let err = sample_episode(&c, &EpisodeSpec::new(5, 5, 5).unwrap(), &mut SeedRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("L04"), "{err}");
    }

    #[test]
    fn training_batch_draws_twenty_labels() {
        let c = corpus(24, 10);
        let spec = EpisodeSpec::new(5, 5, 5).unwrap();
        let ep = sample_training_batch(&c, &spec, 20, &mut SeedRng::new(2)).unwrap();
        assert_eq!(ep.label_universe.len(), 20);
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 100);
        assert_eq!(ep.query.len(), 100);
        let small = corpus(19, 10);
        assert!(matches!(
            sample_training_batch(&small, &spec, 20, &mut SeedRng::new(2)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn partition_sizes_and_constraint() {
        let c = corpus(6, 10);
        let ep = sample_episode(&c, &EpisodeSpec::new(5, 5, 5).unwrap(), &mut SeedRng::new(3)).unwrap();
        let p = partition_support(&ep, 2, &mut SeedRng::new(5)).unwrap();
        p.validate_against(&ep).unwrap();
        assert!(p.aux_query.iter().all(|q| q.len() == 2));
        assert!(p.aux_support.iter().all(|s| s.len() == 3));
        let err = partition_support(&ep, 5, &mut SeedRng::new(5)).unwrap_err();
        assert!(err.to_string().contains("1 ≤ Q < K"));
        assert!(partition_support(&ep, 0, &mut SeedRng::new(5)).is_err());

        let ep2 = sample_episode(&c, &EpisodeSpec::new(4, 2, 1).unwrap(), &mut SeedRng::new(3)).unwrap();
        let p2 = partition_support(&ep2, 1, &mut SeedRng::new(1)).unwrap();
        assert!(p2.aux_support.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn perturbation_counts_and_flips() {
        let c = corpus(20, 12);
        let spec = EpisodeSpec::new(20, 2, 5).unwrap();
        let ep = sample_episode(&c, &spec, &mut SeedRng::new(8)).unwrap();
        assert_eq!(perturb_labels(&ep, 0.0, &mut SeedRng::new(1)).unwrap(), ep);
        let noisy = perturb_labels(&ep, 0.5, &mut SeedRng::new(1)).unwrap();
        let changed: Vec<_> = ep.query.iter().zip(&noisy.query).filter(|(a, b)| a.class != b.class).collect();
        assert_eq!(changed.len(), 50);
        assert_eq!(noisy.support, ep.support);

        let binary = sample_episode(&c, &EpisodeSpec::new(2, 2, 5).unwrap(), &mut SeedRng::new(8)).unwrap();
        let flipped = perturb_labels(&binary, 1.0, &mut SeedRng::new(2)).unwrap();
        for (a, b) in binary.query.iter().zip(&flipped.query) {
            assert_eq!(b.class, 1 - a.class);
        }
        assert!(perturb_labels(&ep, 1.5, &mut SeedRng::new(1)).is_err());
        assert_eq!(perturbation_count(0.29, 100), 29);
    }
}
