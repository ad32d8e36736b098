//! Named parameter storage, tape sessions and the dense building blocks.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// All learnable arrays keyed by dotted name. The first path segment is the
/// parameter group (`encoder`, `key`, `value`, `query`, `attn`, `l_inf`,
/// `light_field`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Panics on unknown names; parameter names are fixed at model build time.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// A tape plus the parameters bound into it for one forward pass.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.store.expect(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of `output` for every parameter in the store; parameters
    /// that did not take part get zeros.
    pub fn param_grads(&self, output: Var) -> ParamStore {
        let mut grads: Gradients = self.tape.backward(output);
        let mut out = self.store.zeros_like();
        for (name, var) in &self.bound {
            if let Some(g) = grads.take(*var) {
                *out.get_mut(name).expect("bound parameter exists") = g;
            }
        }
        out
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        store.insert(
            self.weight.clone(),
            uniform(&[self.in_dim, self.out_dim], bound, rng),
        );
        store.insert(self.bias.clone(), uniform(&[self.out_dim], bound, rng));
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(&self.weight);
        let b = s.param(&self.bias);
        let y = s.tape.matmul(x, w);
        s.tape.add_bias(y, b)
    }
}

/// Stack of linear layers with ReLU between them and no activation after
/// the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output.
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        Self {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| Linear::new(&format!("{prefix}.{i}"), d[0], d[1]))
                .collect(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, s: &mut Session<'_>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x);
            if i != last {
                x = s.tape.relu(x);
            }
        }
        x
    }
}

pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}
