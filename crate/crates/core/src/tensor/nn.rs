//! Layers assembled from graph primitives.

use crate::scalar::Scalar;
use crate::tensor::{Binding, Graph, Matrix, ParamId, ParamStore, RngStream, TensorError, Var};

/// Stabilizer inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;
/// Stabilizer added to the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// `x · weight + bias`, with `bias` a `1 x out` row.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
    let xw = g.matmul(x, weight)?;
    g.add_row(xw, bias)
}

/// Cosine similarity of two vectors; two zero vectors give 0.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> T {
    let uv = u.iter().zip(v).fold(T::zero(), |a, (&x, &y)| a + x * y);
    let nu = u.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    let nv = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    (uv / (nu * nv + T::of(COSINE_EPS))).max(-T::one()).min(T::one())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &RngStream, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, fan_out, fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var, TensorError> {
        linear(g, x, bind.var(self.weight), bind.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    /// Unit gain, zero shift.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, T::one()));
        let shift = store.add(format!("{name}.shift"), Matrix::zeros(1, dim));
        Self { gain, shift }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, bind.var(self.gain), bind.var(self.shift), T::of(LN_EPS))
    }
}

/// Multi-head attention with per-head column splits and one shared output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
    /// Appends an all-zero key/value slot to every head.
    pub null_slot: bool,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngStream,
        name: &str,
        dim: usize,
        heads: usize,
        null_slot: bool,
    ) -> Result<Self, TensorError> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Heads { dim, heads });
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
            null_slot,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var, TensorError> {
        let q = self.query.forward(g, bind, query)?;
        let k = self.key.forward(g, bind, key)?;
        let v = self.value.forward(g, bind, value)?;
        let mixed = attend(g, q, k, v, self.heads, self.null_slot)?;
        self.output.forward(g, bind, mixed)
    }
}

/// Scaled dot-product attention on already-projected inputs, split into `heads`
/// column blocks and concatenated back.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    null_slot: bool,
) -> Result<Var, TensorError> {
    let dim = g.shape(q).1;
    if heads == 0 || dim % heads != 0 {
        return Err(TensorError::Heads { dim, heads });
    }
    if g.shape(k) != g.shape(v) || g.shape(k).1 != dim {
        return Err(TensorError::Shape { op: "attention", left: g.shape(k), right: g.shape(v) });
    }
    if g.shape(k).0 == 0 {
        return Err(TensorError::Empty("attention keys"));
    }
    let width = dim / heads;
    let scale = T::one() / T::of(width as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * width, width)?;
        let mut kh = g.slice_cols(k, h * width, width)?;
        let mut vh = g.slice_cols(v, h * width, width)?;
        if null_slot {
            let zero = g.constant(Matrix::zeros(1, width));
            kh = g.concat_rows(&[kh, zero])?;
            vh = g.concat_rows(&[vh, zero])?;
        }
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outputs.push(g.matmul(weights, vh)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        g.concat_cols(&outputs)
    }
}
