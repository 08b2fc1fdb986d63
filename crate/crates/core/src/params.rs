//! Named parameter storage and the Adam optimiser.

use rand::Rng;

use crate::autodiff::{Gradients, ParamId, Result, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform `rows×cols` weight.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Records every parameter on `tape` in id order.
    pub fn bind<'a>(&self, tape: &mut Tape<'a>) -> Result<BoundParams> {
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(ParamId(i), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams(vars))
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Wraps handles recorded in [`ParamId`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for BoundParams {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &Matrix| Matrix::zeros(p.rows(), p.cols());
        Self {
            config,
            step: 0,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
        }
    }

    /// Parameters without a gradient are treated as having zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.param(id);
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.as_slice()[k]) + c.weight_decay * p.as_slice()[k];
                let mk = &mut m.as_mut_slice()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let vk = &mut v.as_mut_slice()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                p.as_mut_slice()[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut t = Tape::new(true);
            let p = store.bind(&mut t).unwrap();
            let sq = t.mul(p[id], p[id]).unwrap();
            let l = t.sum(sq).unwrap();
            let g = t.backward(l).unwrap();
            opt.update(&mut store, &g);
        }
        assert!(store.get(id).as_slice().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut t = Tape::new(true);
        let p = store.bind(&mut t).unwrap();
        let l = t.scale(p[id], 5.0).unwrap();
        let g = t.backward(l).unwrap();
        opt.update(&mut store, &g);
        assert!((store.get(id).item() - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
