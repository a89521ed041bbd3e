use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{init_model, GridConfig, PreparedData, RunConfig};
use super::eval::{evaluate, EvalReport};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::model::{EncoderKind, HeadKind};
use crate::training::train;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellKey {
    pub head: HeadKind,
    pub encoder: EncoderKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub lolos: bool,
    pub noise_rate: f64,
}

impl CellKey {
    fn identity(&self) -> (HeadKind, EncoderKind, usize, usize, bool, u64) {
        (self.head, self.encoder, self.n_way, self.k_shot, self.lolos, self.noise_rate.to_bits())
    }

    /// Row label such as `Proto+Att+LoLoss`.
    pub fn model_name(&self) -> String {
        if self.lolos {
            format!("{}+LoLoss", self.head.name())
        } else {
            self.head.name().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub key: CellKey,
    pub report: Option<EvalReport>,
    pub best_dev_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
}

/// Cell keys in table order: each baseline directly followed by its
/// auxiliary-loss twin.
pub fn grid_keys(grid: &GridConfig) -> Result<Vec<CellKey>> {
    let mut keys = Vec::new();
    let mut seen = HashSet::new();
    for &noise_rate in &grid.noise_rates {
        for &encoder in &grid.encoders {
            for &head in &grid.heads {
                for &[n_way, k_shot] in &grid.shots {
                    for &lolos in &grid.lolos {
                        let key = CellKey {
                            head,
                            encoder,
                            n_way,
                            k_shot,
                            lolos,
                            noise_rate,
                        };
                        if !seen.insert(key.identity()) {
                            return Err(Error::Config(format!("duplicate grid cell {key:?}")));
                        }
                        keys.push(key);
                    }
                }
            }
        }
    }
    Ok(keys)
}

/// The run configuration of one cell.
pub fn cell_config(base: &RunConfig, key: &CellKey) -> RunConfig {
    let mut c = base.clone();
    c.head.kind = key.head;
    c.encoder.kind = key.encoder;
    c.eval.n_way = key.n_way;
    c.eval.k_shot = key.k_shot;
    c.train.lolos = key.lolos;
    c.train.noise_rate = key.noise_rate;
    c
}

/// Trains and evaluates one cell on the test split.
pub fn run_cell(data: &PreparedData, base: &RunConfig, key: &CellKey) -> Result<(EvalReport, Option<f64>)> {
    let config = cell_config(base, key);
    config.validate()?;
    let spec = EpisodeSpec::new(key.n_way, key.k_shot, config.eval.q_query)?;
    let model = init_model(&config, &data.vocab)?;
    let outcome = train(&data.splits.train, Some(&data.splits.dev), model, &config.train, &spec)?;
    let report = evaluate(&data.splits.test, &outcome.best, &spec, config.eval.episodes, config.eval.seed)?;
    Ok((report, outcome.best_dev_accuracy))
}

/// Every cell of `base.eval.grid`. A failing cell records its error and
/// the remaining cells still run. Cells share the training seed, so a
/// baseline and its twin see the same training episodes.
pub fn run_grid(data: &PreparedData, base: &RunConfig) -> Result<ExperimentGrid> {
    let keys = grid_keys(&base.eval.grid)?;
    let cells = keys
        .par_iter()
        .map(|key| match run_cell(data, base, key) {
            Ok((report, dev)) => GridCell {
                key: *key,
                report: Some(report),
                best_dev_accuracy: dev,
                error: None,
            },
            Err(e) => GridCell {
                key: *key,
                report: None,
                best_dev_accuracy: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(ExperimentGrid { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts() {
        let g = GridConfig {
            heads: vec![HeadKind::Proto, HeadKind::ProtoAtt],
            encoders: vec![EncoderKind::Cnn],
            shots: vec![[5, 5], [10, 10]],
            lolos: vec![false, true],
            noise_rates: vec![0.0],
        };
        let keys = grid_keys(&g).unwrap();
        assert_eq!(keys.len(), 8);
        assert!(!keys[0].lolos && keys[1].lolos && keys[0].k_shot == keys[1].k_shot);
        let noise = GridConfig {
            heads: vec![HeadKind::ProtoAtt],
            shots: vec![[5, 5]],
            noise_rates: vec![0.2, 0.3, 0.5],
            ..g.clone()
        };
        assert_eq!(grid_keys(&noise).unwrap().len(), 6);
        let empty = GridConfig { heads: vec![], ..g.clone() };
        assert!(grid_keys(&empty).unwrap().is_empty());
        let dup = GridConfig {
            lolos: vec![true, true],
            ..g
        };
        assert!(grid_keys(&dup).is_err());
    }
}
