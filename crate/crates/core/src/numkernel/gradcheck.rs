//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::Tape;
use super::tensor::Tensor;
use super::Var;
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check this many randomly chosen coordinates; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates where the one-sided slopes disagree by more than
    /// this (a max-pool or relu kink lies inside the step).
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordMismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences. `f` must register every entry of `params` on the tape it
/// is given (typically with [`Tape::param`]).
pub fn check_gradients<F>(
    params: &BTreeMap<String, Tensor>,
    config: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Tensor>) -> Result<Var<'t>>,
{
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, p)?.item())
    };

    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let base = loss.item();
    let grads = loss.backward()?;

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Config("gradient check over no trainable coordinates".into()));
    }
    if let Some(limit) = config.max_coords {
        let mut rng = SeedRng::new(config.seed);
        let mut picked = Vec::with_capacity(limit);
        for _ in 0..limit.min(coords.len()) {
            let j = rng.gen_range(0..coords.len());
            picked.push(coords.swap_remove(j));
        }
        coords = picked;
    }

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = params.clone();
    for (name, index) in coords {
        let original = params[&name].data()[index];
        work.get_mut(&name).unwrap().data_mut()[index] = original + config.step;
        let plus = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[index] = original - config.step;
        let minus = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[index] = original;

        let numeric = (plus - minus) / (2.0 * config.step);
        let forward = (plus - base) / config.step;
        let backward = (base - minus) / config.step;
        if (forward - backward).abs() > config.kink_tolerance * numeric.abs().max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[index]);
        let err = relative_error(analytic, numeric, config.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(CoordMismatch {
                param: name,
                index,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}
