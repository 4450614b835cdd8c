use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
///
/// The name set and shapes are fixed once built; every update produces a new
/// `ParamSet` and leaves its input alone.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Gradients keyed like the [`ParamSet`] they were taken against.
pub type GradMap = ParamSet;

/// Shape summary used by checkpoints and config hashing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut out = ParamSet::new();
        for (name, t) in entries {
            out.insert(name, t)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, t.with_requires_grad(false)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.entries
            .iter()
            .map(|(n, t)| ParamSpec { name: n.clone(), shape: t.shape().to_vec() })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    fn check_congruent(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: parameter sets are not congruent")))
        }
    }

    /// Elementwise `self + c·other`.
    pub fn axpy(&self, c: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_congruent(other, "axpy")?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((n, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + c * y).collect();
            entries.push((n.clone(), Tensor::new(a.shape().to_vec(), data)?));
        }
        Ok(ParamSet { entries })
    }

    pub fn scaled(&self, c: f64) -> Result<ParamSet> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            entries.push((n.clone(), t.map(|v| c * v)?));
        }
        Ok(ParamSet { entries })
    }

    /// Replaces the tensor stored under `name` with one of identical shape.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::shape(format!("replace `{name}`: {:?} vs {:?}", slot.1.shape(), t.shape())));
        }
        slot.1 = t.with_requires_grad(false);
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.entries.iter().map(|(_, t)| g.param(t.clone())).collect(),
        }
    }

    /// Flattened values in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }
}

/// A [`ParamSet`] living on a graph: names paired with variables.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        BoundParams { names, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Reads current values back into a [`ParamSet`].
    pub fn snapshot(&self, g: &Graph) -> Result<ParamSet> {
        let mut entries = Vec::with_capacity(self.vars.len());
        for (n, &v) in self.names.iter().zip(&self.vars) {
            entries.push((n.clone(), g.value(v)?.clone().with_requires_grad(false)));
        }
        Ok(ParamSet { entries })
    }
}

/// Gradient of scalar `loss` with respect to `params` as a [`GradMap`].
pub fn backward(g: &mut Graph, loss: Var, params: &BoundParams) -> Result<GradMap> {
    let grads = g.grad(loss, params.vars(), false)?;
    BoundParams::from_parts(params.names.clone(), grads).snapshot(g)
}

/// `params − lr·grads`, as a fresh set.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    params.axpy(-lr, grads).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("sgd_step".into()),
        other => other,
    })
}
