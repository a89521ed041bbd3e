//! Query and leave-out losses, the optimizer and the episodic training loop.

mod loss;
mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use loss::{
    aux_loss, aux_loss_from_encodings, encode_episode, episode_loss, loss_aux, loss_query, loss_total, nll_terms,
    query_loss, query_loss_from_encodings, EpisodeEncodings, EpisodeLoss,
};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::corpus::LabeledCorpus;
use crate::episodes::{partition_support, perturb_labels, sample_training_batch, EpisodeSpec};
use crate::error::{Error, Result};
use crate::evalcli::evaluate;
use crate::model::{Bound, Model};
use crate::numkernel::Tape;
use crate::rng::SeedRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    /// Auxiliary queries per class.
    pub q_aux: usize,
    /// When false the auxiliary loss is off whatever `lambda` says.
    pub lolos: bool,
    pub episodes: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Dev evaluation interval in episodes; 0 disables dev evaluation.
    pub eval_every: usize,
    pub dev_episodes: usize,
    /// Fraction of training queries whose label is perturbed.
    pub noise_rate: f64,
    /// Labels drawn per training episode.
    pub batch_classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            q_aux: 2,
            lolos: true,
            episodes: 5000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 100,
            dev_episodes: 200,
            noise_rate: 0.0,
            batch_classes: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k_shot: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("train.lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("train.noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.batch_classes < 2 {
            return Err(Error::Config("train.batch_classes must be at least 2".into()));
        }
        if self.effective_lambda() > 0.0 && (self.q_aux < 1 || self.q_aux >= k_shot) {
            return Err(Error::Config(format!(
                "train.q_aux must satisfy 1 ≤ Q < K (Q = {}, K = {k_shot})",
                self.q_aux
            )));
        }
        Ok(())
    }

    /// `lambda`, or 0 when the auxiliary loss is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.lolos {
            self.lambda
        } else {
            0.0
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        episode: usize,
        loss_query: f64,
        loss_aux: Option<f64>,
        loss_total: f64,
    },
    Dev {
        episode: usize,
        dev_accuracy: f64,
    },
}

impl LogRecord {
    pub fn write_jsonl(records: &[LogRecord], mut out: impl Write) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best dev accuracy; the final ones when no dev
    /// evaluation ran.
    pub best: Model,
    pub best_dev_accuracy: Option<f64>,
    pub best_episode: usize,
    pub last: Model,
    pub log: Vec<LogRecord>,
}

/// Episodic training. Episode `e` (1-based) samples its batch, its label
/// noise and its support partition from three separate child streams of
/// `config.seed`, so switching either of the latter two on or off never
/// changes which examples are drawn.
pub fn train(
    train_corpus: &LabeledCorpus,
    dev_corpus: Option<&LabeledCorpus>,
    initial: Model,
    config: &TrainConfig,
    target: &EpisodeSpec,
) -> Result<TrainOutcome> {
    target.validate()?;
    config.validate(target.k_shot)?;
    let lambda = config.effective_lambda();
    let root = SeedRng::new(config.seed);
    let dev_seed = rand::RngCore::next_u64(&mut root.split("dev", 0));

    let mut model = initial;
    let mut state = OptimizerState::new(config.optimizer);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;

    for e in 1..=config.episodes {
        let mut episode = sample_training_batch(
            train_corpus,
            target,
            config.batch_classes,
            &mut root.split("train-episode", e as u64),
        )?;
        if config.noise_rate > 0.0 {
            episode = perturb_labels(&episode, config.noise_rate, &mut root.split("noise", e as u64))?;
        }
        let partition = if lambda > 0.0 {
            Some(partition_support(&episode, config.q_aux, &mut root.split("partition", e as u64))?)
        } else {
            None
        };

        let tape = Tape::new();
        let bound = Bound::trainable(&tape, &model.params);
        let loss = episode_loss(&bound, &model.config, &model.vocab, &episode, partition.as_ref(), lambda)?;
        let record = LogRecord::Step {
            episode: e,
            loss_query: loss.query.item(),
            loss_aux: loss.aux.map(|v| v.item()),
            loss_total: loss.total.item(),
        };
        if !loss.total.item().is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at episode {e}")));
        }
        let grads = loss.total.backward()?;
        drop(bound);
        optimizer_step(&mut model.params, &grads, &mut state, config.learning_rate)?;
        log.push(record);

        let due = config.eval_every > 0 && (e % config.eval_every == 0 || e == config.episodes);
        if let (true, Some(dev)) = (due, dev_corpus) {
            let report = evaluate(dev, &model, target, config.dev_episodes, dev_seed)?;
            log.push(LogRecord::Dev {
                episode: e,
                dev_accuracy: report.mean_accuracy,
            });
            if best.as_ref().map_or(true, |(acc, _, _)| report.mean_accuracy > *acc) {
                best = Some((report.mean_accuracy, e, model.clone()));
            }
        }
    }

    Ok(match best {
        Some((acc, episode, best_model)) => TrainOutcome {
            best: best_model,
            best_dev_accuracy: Some(acc),
            best_episode: episode,
            last: model,
            log,
        },
        None => TrainOutcome {
            best: model.clone(),
            best_dev_accuracy: None,
            best_episode: config.episodes,
            last: model,
            log,
        },
    })
}
