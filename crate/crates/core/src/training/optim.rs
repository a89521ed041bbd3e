use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numkernel::Gradients;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam moment estimates per parameter, each with its own step count so a
/// parameter first touched late still gets correct bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.step)
    }
}

/// One update of every parameter that has a gradient. Parameters without
/// a gradient entry are not touched.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?} but its gradient has shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let g = g.data();
        match state.kind {
            OptimizerKind::Sgd => {
                for (w, d) in p.data_mut().iter_mut().zip(g) {
                    *w -= learning_rate * d;
                }
            }
            OptimizerKind::Adam => {
                let m = state.moments.entry(name.clone()).or_insert_with(|| Moments {
                    step: 0,
                    first: vec![0.0; g.len()],
                    second: vec![0.0; g.len()],
                });
                m.step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(m.step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(m.step as i32);
                let w = p.data_mut();
                for i in 0..g.len() {
                    m.first[i] = ADAM_BETA1 * m.first[i] + (1.0 - ADAM_BETA1) * g[i];
                    m.second[i] = ADAM_BETA2 * m.second[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let mhat = m.first[i] / c1;
                    let vhat = m.second[i] / c2;
                    w[i] -= learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}
