use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// 2-D convolutions, spatial attention, norms, embeddings, AppearNet and
    /// the injection projections.
    Spatial,
    /// Temporal convolutions and temporal attention.
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    /// Put every parameter on `graph` as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, requires_grad: bool) -> Vec<Var<'g, T>> {
        self.params.iter().map(|p| graph.leaf(p.value.clone(), requires_grad)).collect()
    }
}

/// Parameter builder used during construction.
pub(crate) struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    prefix: Vec<String>,
    group: ParamGroup,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Builder { store, rng, prefix: Vec::new(), group: ParamGroup::Spatial }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    pub fn with_group<R>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> R) -> R {
        let old = std::mem::replace(&mut self.group, group);
        let r = f(self);
        self.group = old;
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut n = self.prefix.join(".");
        if !n.is_empty() {
            n.push('.');
        }
        n.push_str(leaf);
        n
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`.
    pub fn normal(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::c(rng.normal() * std));
        let name = self.full_name(leaf);
        self.store.add(name, self.group, value)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, self.group, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, self.group, Tensor::ones(shape))
    }

    /// Fresh parameter holding a copy of an existing one's value.
    pub fn copy_of(&mut self, leaf: &str, source: ParamId) -> ParamId {
        let value = self.store.get(source).value.clone();
        let name = self.full_name(leaf);
        self.store.add(name, self.group, value)
    }
}
