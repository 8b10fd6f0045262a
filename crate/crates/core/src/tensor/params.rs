use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Matrix, RngStream, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Parameter with entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &RngStream,
    ) -> ParamId {
        let name = name.into();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut r = rng.child(&name).rng();
        let data = (0..rows * cols).map(|_| T::of(r.random_range(-bound..=bound))).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("sized data");
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        Binding { vars: self.values.iter().map(|v| graph.leaf(v.clone())).collect() }
    }
}

/// Graph leaves for one [`ParamStore`] in one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps leaves created elsewhere, in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaves in parameter registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients, zero where a parameter did not reach the root.
    pub fn collect<T: Scalar>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Matrix<T>> {
        self.vars.iter().zip(store.ids()).map(|(&v, id)| grads.wrt(v, store.get(id).shape())).collect()
    }
}
