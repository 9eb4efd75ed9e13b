//! Named parameter storage and the per-evaluation binding of parameters
//! into an autodiff graph.

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::{real, Scalar};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// All trainable tensors of a model, keyed by canonical dotted names
/// (`module.path.param`). Insertion order is the update order, so runs
/// are reproducible.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    map: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Sum of squared differences against another store, for
    /// did-the-update-move checks.
    pub fn sq_distance(&self, other: &ParamStore<T>) -> f64 {
        let mut acc = 0.0;
        for (name, a) in self.iter() {
            let b = other.get(name);
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x.to_f64() - y.to_f64();
                acc += d * d;
            }
        }
        acc
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            out.insert(name, v.mapv(|x| real::<U>(x.to_f64())));
        }
        out
    }
}

/// One forward/backward evaluation: a graph plus the parameters bound
/// into it. Binding the same name twice reuses the leaf so gradients
/// from multiple passes accumulate.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: IndexMap<String, Var>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let var = self.graph.leaf(self.store.get(name).clone());
        self.bound.insert(name.to_string(), var);
        var
    }

    /// Gradients of every bound parameter that received one, keyed by
    /// name, in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, ArrayD<T>> {
        let mut out = IndexMap::new();
        for name in self.store.names() {
            if let Some(var) = self.bound.get(name) {
                if let Some(g) = grads.get(*var) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Draws are
/// made at f64 so a seed produces the same weights at every precision.
pub fn uniform_fan_in<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = real(rng.random_range(-bound..bound));
    }
    out
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}
