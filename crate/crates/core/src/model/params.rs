use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::SeedRng;

pub const WORD_EMBEDDINGS: &str = "word_embeddings";
pub const POSITION_EMBEDDINGS: &str = "position_embeddings";

/// Every trainable tensor of a model, by unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams(BTreeMap<String, Tensor>);

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.0.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.0.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }
}

/// Glorot-uniform `[fan_in × fan_out]` matrix.
pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape").trainable()
}

pub(crate) fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).trainable()
}

pub(crate) fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n]).trainable()
}

/// Parameters placed on a tape on first use.
///
/// In frozen mode every parameter is recorded as a constant, so an
/// evaluation pass keeps no gradient bookkeeping.
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    params: &'p ModelParams,
    trainable: bool,
    vars: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn trainable(tape: &'t Tape, params: &'p ModelParams) -> Self {
        Self {
            tape,
            params,
            trainable: true,
            vars: RefCell::default(),
        }
    }

    pub fn frozen(tape: &'t Tape, params: &'p ModelParams) -> Self {
        Self {
            tape,
            params,
            trainable: false,
            vars: RefCell::default(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        let var = if self.trainable {
            self.tape.param(name, tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }
}
