//! Named parameter storage shared by layers, the optimizer, checkpointing,
//! and the finite-difference checker.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Handle to one named parameter tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Flat ordered set of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor under a unique name. Registration order is the
    /// serialization order.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        tensor.requires_grad = true;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total scalar coordinate count.
    pub fn coord_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Precision switch (f32 <-> f64), preserving names and order.
    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.convert()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform Xavier/Glorot matrix of shape `[rows, cols]`.
pub fn xavier_uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    xavier_uniform_scaled(rng, rows, cols, 1.0)
}

/// Xavier init with an extra multiplier on the bound.
pub fn xavier_uniform_scaled<T: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Tensor<T> {
    let bound = scale * (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::cast(rng.gen_range(-bound..bound)))
        .collect();
    let mut t = Tensor::zeros(vec![rows, cols]);
    t.data_mut().copy_from_slice(&data);
    t
}

/// One forward pass: a fresh tape plus lazily-registered parameter leaves.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    vars: Vec<Option<Var>>,
    pub training: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
    /// Smallest gap between a kept and a dropped top-k score seen in this
    /// pass; finite-difference harnesses reject instances where a
    /// perturbation could flip the selection.
    pub min_selection_margin: f64,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(params: &'a ParamSet<T>, training: bool, dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            vars: vec![None; params.len()],
            training,
            dropout,
            rng,
            min_selection_margin: f64::INFINITY,
        }
    }

    /// Evaluation-mode context (dropout off, RNG unused).
    pub fn eval(params: &'a ParamSet<T>) -> Self {
        use rand::SeedableRng;
        Ctx::new(params, false, 0.0, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Tape variable for a parameter, registering it as a leaf on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Dropout at the context's configured rate.
    pub fn apply_dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout;
        self.tape.dropout(x, rate, &mut self.rng, self.training)
    }

    /// Gradient of one parameter after backward; zeros when unused.
    pub fn grad_of(&self, id: ParamId) -> Vec<T> {
        match self.vars[id.0] {
            Some(v) => self.tape.grad_or_zeros(v),
            None => vec![T::zero(); self.params.get(id).numel()],
        }
    }

    /// Add this pass's gradients into per-parameter accumulators.
    pub fn accumulate_grads(&self, acc: &mut [Vec<T>]) -> Result<()> {
        if acc.len() != self.params.len() {
            return Err(Error::contract(format!(
                "gradient accumulator has {} entries for {} parameters",
                acc.len(),
                self.params.len()
            )));
        }
        for id in self.params.ids() {
            if let Some(v) = self.vars[id.0] {
                if let Some(g) = self.tape.grad(v) {
                    for (a, &gi) in acc[id.0].iter_mut().zip(g) {
                        *a = *a + gi;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = xavier_uniform(&mut rng, 16, 16);
        let bound = (6.0 / 32.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn params_leaf_once_and_grads_flow() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let mut ctx = Ctx::eval(&ps);
        let v1 = ctx.p(w);
        let v2 = ctx.p(w);
        assert_eq!(v1, v2);
        let loss = ctx.tape.sum(v1);
        ctx.tape.backward(loss).unwrap();
        assert_eq!(ctx.grad_of(w), vec![1.0, 1.0]);
    }
}
