//! Named parameter storage and per-graph binding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{GradCheckReport, Gradients, Graph, NumericsError, Real, Rng, Tensor, Var};

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pretrained text-to-image backbone.
    Backbone,
    /// Subject-injection parameters on the semantic path, conditions and nulls.
    Subject,
    /// Content-stream projectors of the multi-modal attention.
    Content,
    /// The null text embedding, trained in both phases.
    TextNull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor<T>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.groups.push(group);
        ParamId(self.names.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::lit(rng.normal() * std));
        self.add(name, group, t)
    }

    pub fn add_zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_full(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape, T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<(), NumericsError> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "param_set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            groups: self.groups.clone(),
            index: self.index.clone(),
        }
    }
}

/// Which parameters receive gradients in a graph.
#[derive(Clone, Debug)]
pub enum Trainable {
    None,
    All,
    Groups(Vec<ParamGroup>),
}

impl Trainable {
    fn admits(&self, g: ParamGroup) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Groups(gs) => gs.contains(&g),
        }
    }
}

/// A graph plus the lazily created variables of the parameters it reads.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: Trainable,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        let g = match trainable {
            Trainable::None => Graph::inference(),
            _ => Graph::new(),
        };
        Self {
            g,
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Trainable::None)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// The variable holding parameter `id` in this graph.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable.admits(self.store.group(id)) {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Backpropagates `loss` and returns per-parameter gradients (None for untouched or frozen ones).
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>, NumericsError> {
        let grads: Gradients<T> = self.g.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect())
    }

    /// `x W + b` for `x [n, din]`, `W [din, dout]`, optional `b [dout]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NumericsError> {
        let wv = self.p(w);
        let y = self.g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.p(b);
                self.g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Weight + bias pair of a dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform-variance init scaled by `1/sqrt(din)`; `zero` gives an all-zero layer.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        zero: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = if zero {
            store.add_zeros(&format!("{name}.w"), group, &[din, dout])
        } else {
            store.add_normal(
                &format!("{name}.w"),
                group,
                &[din, dout],
                1.0 / (din as f64).sqrt(),
                rng,
            )
        };
        let b = store.add_zeros(&format!("{name}.b"), group, &[dout]);
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, NumericsError> {
        ctx.linear(x, self.w, Some(self.b))
    }
}

/// Finite-difference check of every parameter gradient of a scalar built by `f`.
///
/// `stride` checks every `stride`-th coordinate of each tensor (always the first).
pub fn grad_check_params<F, E>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut ctx = Ctx::new(s, Trainable::None);
        let out = f(&mut ctx)?;
        let v = ctx.g.value(out);
        if v.numel() != 1 {
            return Err(NumericsError::NonScalar(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };
    let mut ctx = Ctx::new(store, Trainable::All);
    let out = f(&mut ctx)?;
    let grads = ctx.param_grads(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids() {
        let base = store.get(id);
        let analytic = grads[id.0]
            .as_ref()
            .map(|t| t.to_vec())
            .unwrap_or_else(|| vec![0.0; base.numel()]);
        for j in (0..base.numel()).step_by(stride.max(1)) {
            let mut plus = base.to_vec();
            plus[j] += eps;
            work.set(id, Tensor::new(base.shape().to_vec(), plus)?)?;
            let fp = eval(&work)?;
            let mut minus = base.to_vec();
            minus[j] -= eps;
            work.set(id, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (id.0, j);
            }
            report.checked += 1;
        }
        work.set(id, base.clone())?;
    }
    Ok(report)
}
