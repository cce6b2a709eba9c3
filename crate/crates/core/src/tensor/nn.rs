use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Running statistics; checkpointed but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
    grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Named parameters of one model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable: kind == ParamKind::Weight,
            kind,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    /// Marks every weight whose name starts with one of `prefixes` trainable
    /// and every other weight frozen.
    pub fn set_trainable_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable =
                p.kind == ParamKind::Weight && prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    /// Adds the gradients of every trainable parameter bound on `graph`
    /// into this store, and commits staged buffer updates.
    pub fn absorb(&mut self, graph: &mut Graph) {
        for &(id, var) in graph.bound_params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let acc = p.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = graph.grad(var) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        self.commit_buffers(graph);
    }

    pub fn commit_buffers(&mut self, graph: &mut Graph) {
        for (id, value) in graph.take_buffers() {
            self.params[id.0].tensor = value;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Euclidean norm of the accumulated gradients of parameters under `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names and exact value bits of every entry under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value through f32, the checkpoint payload precision.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn weight_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            init_uniform(&[in_dim, out_dim], in_dim, rng),
            ParamKind::Weight,
        )?;
        let bias = store.add(
            &format!("{name}.bias"),
            init_uniform(&[out_dim], in_dim, rng),
            ParamKind::Weight,
        )?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).tensor.data_mut().fill(0.0);
        store.get_mut(self.bias).tensor.data_mut().fill(0.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamKind::Weight)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Weight)?,
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[dim]), ParamKind::Buffer)?,
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(&[dim], 1.0), ParamKind::Buffer)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Train mode normalizes with batch statistics and stages a running
    /// statistics update on the graph (unbiased variance, momentum 0.1).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let n = g.shape(x).first().copied().unwrap_or(0);
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let unbias = n as f64 / (n as f64 - 1.0);
                let mut rm = g.buffer(store, self.running_mean);
                let mut rv = g.buffer(store, self.running_var);
                for (r, b) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
                g.stage_buffer(self.running_mean, rm);
                g.stage_buffer(self.running_var, rv);
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).tensor.data().to_vec();
                let rv = store.get(self.running_var).tensor.data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamKind::Weight)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Weight)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
        .collect();
    let m = g.input(Tensor::from_parts(shape, mask));
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]), ParamKind::Weight).unwrap();
        assert!(matches!(
            s.add("a", Tensor::zeros(&[1]), ParamKind::Weight),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![2.0]), ParamKind::Weight).unwrap();
        s.set_trainable("w", false);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        s.absorb(&mut g);
        assert!(!s.has_grads());
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode_only() {
        let mut s = ParamStore::new();
        let bn = BatchNorm::new(&mut s, "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let y = bn.forward(&mut g, &s, x, Mode::Train).unwrap();
        // normalized to -1, +1 up to eps
        let yv = g.value(y).data();
        assert!((yv[0] + 1.0).abs() < 1e-4 && (yv[1] - 1.0).abs() < 1e-4);
        s.commit_buffers(&mut g);
        assert!((s.get(bn.running_mean).tensor.data()[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2
        assert!((s.get(bn.running_var).tensor.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
        let before = s.hash_prefix("bn");
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        bn.forward(&mut g, &s, x, Mode::Eval).unwrap();
        s.commit_buffers(&mut g);
        assert_eq!(before, s.hash_prefix("bn"));
    }
}
