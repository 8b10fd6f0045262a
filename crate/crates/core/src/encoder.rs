//! Prompt-conditioned query encoder.
//!
//! One prompt (text tokens plus optional exemplars) becomes a conditioning
//! sequence; learned query seeds anchored on prompt-ranked scene instances
//! then cross-attend to `[instance tokens ; conditioning]` through one
//! attention block. The same parameters serve the positive and the negative
//! prompt.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::scalar::Scalar;
use crate::scene::{CategoryId, Scene, EXEMPLARS};
use crate::tensor::nn::{cosine_similarity, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Binding, Graph, Matrix, ParamId, ParamStore, RngStream, Var};

/// Token table layout: family tokens first, then attribute tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub families: usize,
    pub attributes: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.families + self.attributes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[family token, attribute token]` for a category id such as `f03.a2`.
    pub fn tokens(&self, category: &str) -> Result<Vec<usize>, ModelError> {
        let id: CategoryId = category.parse().map_err(|_| ModelError::UnknownToken(category.to_string()))?;
        if id.family >= self.families {
            return Err(ModelError::UnknownToken(id.family_token()));
        }
        if id.attribute >= self.attributes {
            return Err(ModelError::UnknownToken(id.attribute_token()));
        }
        Ok(vec![id.family, self.families + id.attribute])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    Positive,
    Negative,
}

/// One side of a prompt: optional category text and 0 or 3 exemplars.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prompt {
    /// `None` is the "none" sentinel.
    pub category: Option<String>,
    pub exemplars: Vec<Vec<f64>>,
}

impl Prompt {
    pub fn text(category: impl Into<String>) -> Self {
        Self { category: Some(category.into()), exemplars: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.category.is_none() && self.exemplars.is_empty()
    }
}

/// Positive prompt (text required) and optional negative prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub positive: Prompt,
    pub negative: Option<Prompt>,
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.positive.category.is_none() {
            return Err(ModelError::Contract("positive prompt text is required".into()));
        }
        for p in std::iter::once(&self.positive).chain(self.negative.as_ref()) {
            if !(p.exemplars.is_empty() || p.exemplars.len() == EXEMPLARS) {
                return Err(ModelError::ExemplarCount(p.exemplars.len()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub queries: usize,
    pub dim: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub vocab: Vocabulary,
}

/// Query set living in one graph.
#[derive(Clone, Debug)]
pub struct EncodedQueries<T> {
    /// `n x d`.
    pub queries: Var,
    /// Scene instance anchoring each slot; `None` for padding slots.
    pub anchors: Vec<Option<usize>>,
    /// `n x 2` reference centers (anchor center, or grid center for padding).
    pub centers: Matrix<T>,
    pub role: PromptRole,
}

/// Plain-value query set.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet<T> {
    pub queries: Matrix<T>,
    pub role: PromptRole,
    pub scene_id: String,
}

/// Fixed per-dimension standardization of raw instance and exemplar features.
///
/// Attribute variants differ in a small subspace on top of components every
/// variant shares; standardizing against training statistics brings those
/// directions to unit scale before the first projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub const MIN_STD: f64 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and inverse standard deviation over every instance of `scenes`;
    /// the identity when there are no instances.
    pub fn fit(scenes: &[Scene], dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for inst in scenes.iter().flat_map(|s| &s.instances) {
            for (k, &x) in inst.features.iter().enumerate().take(dim) {
                sum[k] += x;
                sq[k] += x * x;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| 1.0 / (q / n - m * m).max(0.0).sqrt().max(Self::MIN_STD))
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        features.iter().zip(self.mean.iter().zip(&self.scale)).map(|(x, (m, s))| (x - m) * s).collect()
    }

    fn matrix<T: Scalar>(&self, rows: &[Vec<f64>]) -> Result<Matrix<T>, ModelError> {
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| self.apply(r)).collect();
        Ok(Matrix::from_f64_rows(&normed)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    pub shape: EncoderShape,
    pub feature_norm: FeatureNorm,
    pub token_table: ParamId,
    pub text_proj: Linear,
    pub exemplar_proj: Linear,
    pub null_token: ParamId,
    pub instance_proj: Linear,
    pub seeds: ParamId,
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl PromptEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &RngStream, shape: EncoderShape) -> Result<Self, ModelError> {
        if shape.queries < 1 {
            return Err(ModelError::Config("encoder needs at least one query".into()));
        }
        let d = shape.dim;
        Ok(Self {
            shape,
            feature_norm: FeatureNorm::identity(shape.feature_dim),
            token_table: store.add_uniform("enc.tokens", shape.vocab.len(), d, d, rng),
            text_proj: Linear::new(store, rng, "enc.text", d, d),
            exemplar_proj: Linear::new(store, rng, "enc.exemplar", shape.feature_dim, d),
            null_token: store.add_uniform("enc.null", 1, d, d, rng),
            instance_proj: Linear::new(store, rng, "enc.instance", shape.feature_dim, d),
            // slots are already anchored on instances, so seeds start neutral
            seeds: store.add("enc.seeds", Matrix::zeros(shape.queries, d)),
            attention: MultiHeadAttention::new(store, rng, "enc.attn", d, shape.heads, false)?,
            norm: LayerNorm::new(store, "enc.norm", d),
        })
    }

    /// Conditioning sequence: embedded text tokens followed by projected
    /// exemplars; an empty prompt yields the single null token.
    pub fn encode_prompt<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        tokens: &[usize],
        exemplars: &[Vec<f64>],
    ) -> Result<Var, ModelError> {
        if !(exemplars.is_empty() || exemplars.len() == EXEMPLARS) {
            return Err(ModelError::ExemplarCount(exemplars.len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.shape.vocab.len()) {
            return Err(ModelError::UnknownToken(format!("#{bad}")));
        }
        let mut parts = Vec::new();
        if !tokens.is_empty() {
            let emb = g.gather_rows(bind.var(self.token_table), tokens)?;
            parts.push(self.text_proj.forward(g, bind, emb)?);
        }
        if !exemplars.is_empty() {
            let ex = g.constant(self.feature_norm.matrix(exemplars)?);
            parts.push(self.exemplar_proj.forward(g, bind, ex)?);
        }
        match parts.len() {
            0 => Ok(bind.var(self.null_token)),
            1 => Ok(parts[0]),
            _ => Ok(g.concat_rows(&parts)?),
        }
    }

    /// Conditioning sequence for a [`Prompt`].
    pub fn encode_prompt_spec<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        prompt: &Prompt,
    ) -> Result<Var, ModelError> {
        let tokens = match &prompt.category {
            Some(c) => self.shape.vocab.tokens(c)?,
            None => Vec::new(),
        };
        self.encode_prompt(g, bind, &tokens, &prompt.exemplars)
    }

    /// Projected instance tokens, `K x d` (`None` for an empty scene).
    pub fn instance_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        scene: &Scene,
    ) -> Result<Option<Var>, ModelError> {
        if scene.instances.is_empty() {
            return Ok(None);
        }
        let rows: Vec<Vec<f64>> = scene.instances.iter().map(|i| i.features.clone()).collect();
        let feats = g.constant(self.feature_norm.matrix(&rows)?);
        Ok(Some(self.instance_proj.forward(g, bind, feats)?))
    }

    /// Ranks instances by their best cosine match to any conditioning token;
    /// ties fall back to `(row, col)` order. Returns at most `n` indices.
    pub fn rank_instances<T: Scalar>(&self, scene: &Scene, tokens: &Matrix<T>, conditioning: &Matrix<T>) -> Vec<usize> {
        let order = scene.canonical_order();
        let mut scored: Vec<(usize, T)> = order
            .into_iter()
            .map(|k| {
                let best = (0..conditioning.rows())
                    .map(|l| cosine_similarity(tokens.row(k), conditioning.row(l)))
                    .fold(T::neg_infinity(), T::max);
                (k, best)
            })
            .collect();
        // stable sort keeps canonical order among equal scores
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scored.into_iter().take(self.shape.queries).map(|(k, _)| k).collect()
    }

    pub fn encode_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        scene: &Scene,
        instance_tokens: Option<Var>,
        conditioning: Var,
        role: PromptRole,
    ) -> Result<EncodedQueries<T>, ModelError> {
        let n = self.shape.queries;
        let d = self.shape.dim;
        if g.shape(conditioning).1 != d {
            return Err(ModelError::Config(format!(
                "conditioning width {} does not match model dimension {d}",
                g.shape(conditioning).1
            )));
        }
        let selected = match instance_tokens {
            Some(x) => self.rank_instances(scene, g.value(x), g.value(conditioning)),
            None => Vec::new(),
        };
        let mut parts = Vec::new();
        if let (Some(x), false) = (instance_tokens, selected.is_empty()) {
            parts.push(g.gather_rows(x, &selected)?);
        }
        if selected.len() < n {
            parts.push(g.constant(Matrix::zeros(n - selected.len(), d)));
        }
        let anchors = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let start = g.add(anchors, bind.var(self.seeds))?;

        let memory = match instance_tokens {
            Some(x) => g.concat_rows(&[x, conditioning])?,
            None => conditioning,
        };
        let attended = self.attention.forward(g, bind, start, memory, memory)?;
        let mixed = g.add(start, attended)?;
        let queries = self.norm.forward(g, bind, mixed)?;

        let [rows, cols] = scene.grid;
        let mut centers = Matrix::zeros(n, 2);
        let mut slots = vec![None; n];
        for slot in 0..n {
            let c = match selected.get(slot) {
                Some(&k) => {
                    slots[slot] = Some(k);
                    scene.instances[k].center
                }
                None => [rows as f64 / 2.0, cols as f64 / 2.0],
            };
            centers.set(slot, 0, T::of(c[0]));
            centers.set(slot, 1, T::of(c[1]));
        }
        Ok(EncodedQueries { queries, anchors: slots, centers, role })
    }
}
