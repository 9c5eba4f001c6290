//! Learnable parameters, the named parameter store, and SGD with momentum.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// A named learnable tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let momentum = vec![0.0; tensor.len()];
        Self {
            name: name.into(),
            tensor,
            momentum,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::DuplicateParameter(param.name));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Like [`ParamStore::get`] but panics with the missing name; for model code
    /// whose parameter names are fixed at construction.
    pub fn expect(&self, name: &str) -> &Parameter {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v = momentum * v + (g + weight_decay * w)`, then `w -= lr * v`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    grads: &GradMap,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum {momentum} must lie in [0, 1)"
        )));
    }
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    // Validate everything before touching any weight.
    for p in &params {
        match grads.get(&p.name) {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.len() != p.numel() => {
                return Err(Error::dim(
                    "sgd_step",
                    format!("gradient for `{}` has {} values, parameter has {}", p.name, g.len(), p.numel()),
                ))
            }
            Some(_) => {}
        }
    }
    for p in params {
        let g = &grads[&p.name];
        let Parameter {
            tensor, momentum: v, ..
        } = p;
        for ((w, v), &g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + (g + weight_decay * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}
