use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a unique dotted name, e.g. `fusion.psi.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Registry of trainable parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) })
            .collect()
    }

    /// Gradients for bound parameters; unreachable parameters get zeros.
    pub fn collect_grads(&self, tape: &mut Tape<S>, vars: &[Var]) -> Vec<Vec<S>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| tape.take_grad(v).unwrap_or_else(|| vec![S::zero(); p.tensor.len()]))
            .collect()
    }
}
