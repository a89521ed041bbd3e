use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EventExample, LabeledCorpus};
use crate::episodes::{sample_episode, Episode, EpisodeSpec};
use crate::error::Result;
use crate::model::{argmax, Bound, ClassSupport, Head, Model};
use crate::numkernel::Tape;
use crate::rng::SeedRng;
use crate::training::encode_episode;

/// How accuracy is aggregated. Only episodic averaging exists: every
/// prediction needs a sampled support set.
pub const PROTOCOL: &str = "episodic: mean of per-episode query accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes_evaluated: usize,
    pub mean_accuracy: f64,
    /// Normal-approximation 95% half-width, `1.96 · s / √n`.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub protocol: String,
}

impl EvalReport {
    pub fn from_accuracies(spec: &EpisodeSpec, per_episode: Vec<f64>) -> Self {
        let (mean_accuracy, ci95) = mean_and_ci(&per_episode);
        Self {
            n_way: spec.n_way,
            k_shot: spec.k_shot,
            q_query: spec.q_query,
            episodes_evaluated: per_episode.len(),
            mean_accuracy,
            ci95,
            per_episode,
            protocol: PROTOCOL.to_string(),
        }
    }
}

/// Mean and 95% half-width of `values` (sample standard deviation).
pub fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Predicted class of every query of `episode`.
pub fn predict_episode(model: &Model, episode: &Episode) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.params);
    let head = Head::bind(&model.config.head, &bound)?;
    let enc = encode_episode(&bound, &model.config, &model.vocab, episode)?;
    let classes = (0..enc.n_way)
        .map(|c| {
            let rows: Vec<usize> = (0..enc.k_shot).map(|j| enc.support_row(c, j)).collect();
            ClassSupport::from_stacked(enc.rows.gather_rows(&rows)?)
        })
        .collect::<Result<Vec<_>>>()?;
    (0..episode.query.len())
        .map(|i| {
            let q = enc.rows.row(enc.query_row(i))?;
            let scores = head.scores(q, &head.prototypes(&classes, q)?)?;
            Ok(argmax(&scores.data()))
        })
        .collect()
}

/// Fraction of queries whose predicted class is their labelled class.
pub fn episode_accuracy(model: &Model, episode: &Episode) -> Result<f64> {
    let predicted = predict_episode(model, episode)?;
    let correct = predicted
        .iter()
        .zip(&episode.query)
        .filter(|(p, q)| **p == q.class)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Accuracy over `episodes` test episodes. Episode `i` is sampled from its
/// own child stream of `seed`, so the report does not depend on thread
/// scheduling.
pub fn evaluate(corpus: &LabeledCorpus, model: &Model, spec: &EpisodeSpec, episodes: usize, seed: u64) -> Result<EvalReport> {
    evaluate_with(corpus, spec, episodes, seed, |ep| episode_accuracy(model, ep))
}

/// [`evaluate`] with an arbitrary per-episode scorer.
pub fn evaluate_with<F>(corpus: &LabeledCorpus, spec: &EpisodeSpec, episodes: usize, seed: u64, score: F) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Result<f64> + Sync,
{
    spec.validate()?;
    let root = SeedRng::new(seed);
    if episodes > 0 {
        // surface sampling errors before fanning out
        sample_episode(corpus, spec, &mut root.split("eval-episode", 0))?;
    }
    let accuracies = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let episode = sample_episode(corpus, spec, &mut root.split("eval-episode", i as u64))?;
            score(&episode)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(spec, accuracies))
}

/// Examples of an episode in encoding order.
pub fn episode_examples(episode: &Episode) -> Vec<&EventExample> {
    episode
        .support
        .iter()
        .flatten()
        .map(|s| &s.example)
        .chain(episode.query.iter().map(|q| &q.shot.example))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_ci_match_hand_values() {
        let (m, h) = mean_and_ci(&[0.2, 0.4, 0.6]);
        assert!((m - 0.4).abs() < 1e-15);
        assert!((h - 1.96 * (0.04f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_ci(&[0.7]), (0.7, 0.0));
    }
}
