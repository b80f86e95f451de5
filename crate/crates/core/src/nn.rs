//! Parameter storage and the layer vocabulary shared by the adapter networks.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};

/// Named trainable tensors. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Number of scalars in tensors whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    /// Linear layer `y = x·W + b` with PyTorch's default uniform initialization.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let b = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), b);
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gamma"), Array2::ones((1, dim)));
        self.insert(format!("{name}.beta"), Array2::zeros((1, dim)));
    }

    pub fn init_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, std).expect("valid std");
        self.insert(name, Array2::from_shape_fn((rows, cols), |_| normal.sample(rng)));
    }

    pub fn init_mlp(&mut self, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) {
        for (i, w) in dims.windows(2).enumerate() {
            self.init_linear(&format!("{name}.{i}"), w[0], w[1], rng);
        }
    }

    pub fn init_attention(&mut self, name: &str, dim: usize, rng: &mut ChaCha8Rng) {
        for proj in ["q", "k", "v", "out"] {
            self.init_linear(&format!("{name}.{proj}"), dim, dim, rng);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Attention weights captured during a probed forward pass.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub block: String,
    /// One `queries × keys` matrix per head, after softmax and before dropout.
    pub heads: Vec<Array2<f64>>,
}

impl AttentionProbe {
    pub fn head_mean(&self) -> Array2<f64> {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc += h;
        }
        acc / self.heads.len() as f64
    }
}

/// One forward pass: the tape plus binding of stored parameters to graph leaves.
pub struct Ctx<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
    probing: bool,
    probes: Vec<AttentionProbe>,
}

impl<'p> Ctx<'p> {
    /// Evaluation-mode context: dropout disabled.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            dropout: None,
            probing: false,
            probes: Vec::new(),
        }
    }

    /// Training-mode context with attention dropout probability `p`.
    pub fn train(params: &'p ParamStore, p: f64, rng: ChaCha8Rng) -> Self {
        let mut ctx = Self::eval(params);
        if p > 0.0 {
            ctx.dropout = Some((p, rng));
        }
        ctx
    }

    pub fn with_probes(mut self) -> Self {
        self.probing = true;
        self
    }

    pub fn probes(&self) -> &[AttentionProbe] {
        &self.probes
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Leaf for the stored parameter `name`, bound once per context.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.graph.param(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.graph.value(v)
    }

    /// Runs backward from `loss` and collects gradients for every bound parameter.
    /// Parameters that were never touched get zero gradients.
    pub fn param_grads(&self, loss: Var) -> ParamStore {
        let mut grads: Gradients = self.graph.backward(loss);
        let mut out = self.params.zeros_like();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let y = self.graph.matmul(x, w);
        self.graph.add_row(y, b)
    }

    /// Stack of linear layers with `act` between consecutive layers (none after the last).
    pub fn mlp(&mut self, name: &str, layers: usize, act: Activation, x: Var) -> Var {
        let mut h = x;
        for i in 0..layers {
            h = self.linear(&format!("{name}.{i}"), h);
            if i + 1 < layers {
                h = match act {
                    Activation::Gelu => self.graph.gelu(h),
                    Activation::Relu => self.graph.relu(h),
                };
            }
        }
        h
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        self.graph.layer_norm(x, gamma, beta)
    }

    /// Multi-head scaled dot-product attention with input and output projections.
    pub fn attention(&mut self, name: &str, heads: usize, q: Var, k: Var, v: Var) -> Var {
        let q = self.linear(&format!("{name}.q"), q);
        let k = self.linear(&format!("{name}.k"), k);
        let v = self.linear(&format!("{name}.v"), v);
        let dim = self.graph.shape(q).1;
        assert_eq!(dim % heads, 0, "model width must divide into heads");
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut outputs = Vec::with_capacity(heads);
        let mut captured = Vec::new();
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * head_dim, head_dim);
            let kh = self.graph.slice_cols(k, h * head_dim, head_dim);
            let vh = self.graph.slice_cols(v, h * head_dim, head_dim);
            let scores = self.graph.matmul_t(qh, kh);
            let scores = self.graph.scale(scores, scale);
            let mut weights = self.graph.softmax(scores);
            if self.probing {
                captured.push(self.graph.value(weights).clone());
            }
            if let Some((p, rng)) = self.dropout.as_mut() {
                let keep = 1.0 - *p;
                let (m, n) = self.graph.shape(weights);
                let mask = Array2::from_shape_fn((m, n), |_| {
                    if rng.random_bool(keep) {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                weights = self.graph.mul_const(weights, Rc::new(mask));
            }
            outputs.push(self.graph.matmul(weights, vh));
        }
        if self.probing {
            self.probes.push(AttentionProbe {
                block: name.to_string(),
                heads: captured,
            });
        }
        let merged = self.graph.concat_cols(&outputs);
        self.linear(&format!("{name}.out"), merged)
    }
}
