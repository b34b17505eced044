//! Named parameter storage, deterministic initialisation, and binding of
//! parameters into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Graph, Var};
use crate::tensor::Mat;

/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Parameters keyed by dotted path (`backbone.stage0.block1.dw.weight`).
/// Iteration order is the lexicographic key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Copies every tensor of `other` in under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(join(prefix, k), v.clone());
        }
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.rows, v.cols)))
                .collect(),
        }
    }

    /// `self += other * scale` for every shared name.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (k, v) in &mut self.tensors {
            if let Some(o) = other.tensors.get(k) {
                for (a, b) in v.data.iter_mut().zip(&o.data) {
                    *a += b * scale;
                }
            }
        }
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, m)| m.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for (_, m) in self.iter_mut() {
            m.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Mat::all_finite)
    }

    /// Inserts every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.input(v.clone())))
                .collect(),
        }
    }

    /// Inserts tensors for which `trainable(name)` holds as differentiable
    /// leaves and the rest as constants.
    pub fn bind_where(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) {
                        g.input(v.clone())
                    } else {
                        g.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    /// Inserts every tensor as a constant of `g` (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters of a [`ParamStore`] bound into a graph.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn root(&self) -> Scope<'_> {
        Scope {
            vars: &self.vars,
            prefix: String::new(),
        }
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects parameter gradients into a store shaped like `params`;
    /// parameters that did not influence the root get zeros.
    pub fn gradients(&self, grads: &Grads, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            let like = params.get(k).expect("binding without parameter");
            out.insert(k.clone(), grads.get_or_zeros(*v, like));
        }
        out
    }
}

/// A prefix view into [`Bindings`], mirroring the naming used by [`Init`].
#[derive(Clone)]
pub struct Scope<'a> {
    vars: &'a BTreeMap<String, Var>,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        Scope {
            vars: self.vars,
            prefix: join(&self.prefix, name.as_ref()),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        let key = join(&self.prefix, name);
        match self.vars.get(&key) {
            Some(v) => *v,
            None => panic!("parameter `{key}` is not bound"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Deterministic parameter initialiser writing into a [`ParamStore`].
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> Init<'_> {
        Init {
            prefix: join(&self.prefix, name.as_ref()),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn set(&mut self, name: &str, value: Mat) {
        self.store.insert(join(&self.prefix, name), value);
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.set(name, Mat::zeros(rows, cols));
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.set(name, Mat::full(rows, cols, 1.0));
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    pub fn trunc_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut *self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.set(name, Mat::from_vec(rows, cols, data));
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(lo..hi))
            .collect();
        self.set(name, Mat::from_vec(rows, cols, data));
    }

    /// `weight [din, dout]` (truncated normal) and `bias [1, dout]` (zeros).
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let mut s = self.pp(name);
        s.trunc_normal("weight", din, dout, INIT_STD);
        s.zeros("bias", 1, dout);
    }

    /// Linear layer with both weight and bias zeroed.
    pub fn linear_zeros(&mut self, name: &str, din: usize, dout: usize) {
        let mut s = self.pp(name);
        s.zeros("weight", din, dout);
        s.zeros("bias", 1, dout);
    }

    /// Dense `k x k` convolution stored in im2col layout `[k*k*cin, cout]`.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.linear(name, k * k * cin, cout);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        let mut s = self.pp(name);
        s.ones("gamma", 1, c);
        s.zeros("beta", 1, c);
    }
}
