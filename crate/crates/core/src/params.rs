//! Named trainable tensors with paired gradient buffers.

use indexmap::IndexMap;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `(-s, s)` with `s = sqrt(1 / fan_in)`.
    FanIn(usize),
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Const(f64),
}

/// Ordered name -> parameter map. Iteration order is insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    entries: IndexMap<String, Param<T>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: IndexMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a new parameter, drawing its initial value from the store rng.
    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match init {
            Init::FanIn(fan_in) => {
                let s = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(self.rng.random_range(-s..s))).collect()
            }
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break T::from_f64(v);
                        }
                    })
                    .collect()
            }
            Init::Const(c) => vec![T::from_f64(c); n],
        };
        let value = Tensor::new(dims.clone(), data)?;
        let id = ParamId(self.entries.len());
        self.entries.insert(
            name,
            Param {
                value,
                grad: Tensor::zeros(dims),
            },
        );
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("param id").0
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Replace a value, keeping dims.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.value.dims() != value.dims() {
            return Err(Error::shape("ParamStore::set", p.value.dims(), value.dims()));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Put every parameter on `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &Graph<T>) -> Bound {
        Bound {
            vars: self.entries.values().map(|p| graph.leaf(p.value.clone())).collect(),
        }
    }

    /// Put every parameter on `graph` as a constant (inference).
    pub fn bind_frozen(&self, graph: &Graph<T>) -> Bound {
        Bound {
            vars: self.entries.values().map(|p| graph.constant(p.value.clone())).collect(),
        }
    }

    /// Add leaf gradients from a backward pass into the store's grad buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &v) in self.entries.values_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

/// Graph variables for each store entry, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_unique_names() {
        let mut s = ParamStore::<f32>::new(1);
        s.add("b", vec![2], Init::Const(0.0)).unwrap();
        s.add("a", vec![3], Init::FanIn(3)).unwrap();
        assert!(s.add("a", vec![1], Init::Const(0.0)).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(s.numel(), 5);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut s = ParamStore::<f64>::new(seed);
            s.add("w", vec![50], Init::FanIn(4)).unwrap();
            s.add("t", vec![200], Init::TruncNormal(0.02)).unwrap();
            s
        };
        let (a, b, c) = (build(7), build(7), build(8));
        assert_eq!(a.by_name("w").unwrap().value, b.by_name("w").unwrap().value);
        assert_ne!(a.by_name("w").unwrap().value, c.by_name("w").unwrap().value);
        assert!(a.by_name("w").unwrap().value.data().iter().all(|v| v.abs() < 0.5));
        assert!(a.by_name("t").unwrap().value.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn accumulate_adds_across_calls() {
        let mut s = ParamStore::<f64>::new(0);
        s.add("p", vec![2], Init::Const(1.5)).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let b = s.bind(&g);
            let v = b.var(ParamId(0));
            let sq = g.mul(v, v).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            s.accumulate(&b, &grads);
        }
        assert_eq!(s.by_name("p").unwrap().grad.data(), &[6.0, 6.0]);
    }
}
