//! Dot decoder, set matching, training losses, density branch and counting.

pub mod matching;

use std::sync::Arc;

use crate::config::Config;
use crate::error::ModelError;
use crate::scalar::Scalar;
use crate::scene::kernel_weights;
use crate::scene::Scene;
use crate::tensor::nn::Linear;
use crate::tensor::{Binding, Graph, Matrix, ParamStore, RngStream, SplatPlan, Var};

pub use matching::assign;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    /// Projects queries into the prompt space for the alignment score.
    pub align: Linear,
    pub score: Linear,
    pub offset: Linear,
    pub extent: Linear,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &RngStream, dim: usize) -> Self {
        Self {
            align: Linear::new(store, rng, "dec.align", dim, dim),
            score: Linear::new(store, rng, "dec.score", dim, 1),
            offset: Linear::new(store, rng, "dec.offset", dim, 2),
            extent: Linear::new(store, rng, "dec.extent", dim, 2),
        }
    }
}

/// Graph handles for one decoded query set.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// `n x 1`, in (0, 1).
    pub scores: Var,
    /// `n x 2`, `(row, col)` in cell units.
    pub centers: Var,
    /// `n x 2` box extents; predicted but never supervised.
    pub extents: Var,
}

/// Plain-value predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub centers: Vec<[f64; 2]>,
    pub extents: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
}

impl PredictionSet {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, d: &DecodedVars) -> Self {
        let rows = |v: Var| -> Vec<[f64; 2]> {
            let m = g.value(v);
            (0..m.rows()).map(|i| [m.get(i, 0).as_f64(), m.get(i, 1).as_f64()]).collect()
        };
        Self {
            centers: rows(d.centers),
            extents: rows(d.extents),
            scores: g.value(d.scores).data().iter().map(|s| s.as_f64()).collect(),
        }
    }

    pub fn count(&self, tau: f64) -> usize {
        count(&self.scores, tau)
    }
}

/// Scores are a sigmoid of a query/prompt alignment term plus a linear term;
/// centers are the slot reference point plus a regressed offset; extents
/// pass through softplus.
///
/// `prompt` is the `1 x d` mean of the positive conditioning sequence.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    dec: &Decoder,
    queries: Var,
    reference: &Matrix<T>,
    prompt: Var,
) -> Result<DecodedVars, ModelError> {
    let dim = g.shape(queries).1;
    let aligned = dec.align.forward(g, bind, queries)?;
    let dots = g.matmul_t(aligned, prompt)?;
    let dots = g.scale(dots, T::one() / T::of(dim as f64).sqrt());
    let linear = dec.score.forward(g, bind, queries)?;
    let logits = g.add(dots, linear)?;
    let scores = g.sigmoid(logits);
    let offsets = dec.offset.forward(g, bind, queries)?;
    let refs = g.constant(reference.clone());
    let centers = g.add(refs, offsets)?;
    let raw = dec.extent.forward(g, bind, queries)?;
    let extents = g.softplus(raw);
    Ok(DecodedVars { scores, centers, extents })
}

/// Query-to-point pairs from an optimal assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, point)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn labels(&self, queries: usize) -> Vec<f64> {
        let mut y = vec![0.0; queries];
        for &(q, _) in &self.pairs {
            y[q] = 1.0;
        }
        y
    }
}

pub fn match_cost(center: [f64; 2], score: f64, point: [f64; 2]) -> f64 {
    (center[0] - point[0]).abs() + (center[1] - point[1]).abs() + (1.0 - score)
}

/// Minimum-cost assignment of queries to ground-truth points under
/// `|center - point|_1 + (1 - score)`.
pub fn match_points(preds: &PredictionSet, points: &[[f64; 2]]) -> MatchResult {
    let n = preds.scores.len();
    let mut cost = Vec::with_capacity(n * points.len());
    for i in 0..n {
        for p in points {
            cost.push(match_cost(preds.centers[i], preds.scores[i], *p));
        }
    }
    let assignment = assign(&cost, n, points.len());
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (q, a) in assignment.into_iter().enumerate() {
        match a {
            Some(p) => pairs.push((q, p)),
            None => unmatched.push(q),
        }
    }
    MatchResult { pairs, unmatched }
}

/// Scalar focal loss for one score, with the same clamp as the graph op.
pub fn focal_term(s: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    crate::tensor::focal_value(s, y, alpha, gamma)
}

/// Summed focal loss over all queries.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var, ModelError> {
    let y: Vec<T> = labels.iter().map(|&v| T::of(v)).collect();
    Ok(g.focal_loss(scores, &y, T::of(alpha), T::of(gamma))?)
}

/// Summed L1 distance between matched centers and their points; zero with no pairs.
pub fn localization_loss<T: Scalar>(
    g: &mut Graph<T>,
    centers: Var,
    m: &MatchResult,
    points: &[[f64; 2]],
) -> Result<Var, ModelError> {
    if m.pairs.is_empty() {
        return Ok(g.constant(Matrix::scalar(T::zero())));
    }
    let queries: Vec<usize> = m.pairs.iter().map(|&(q, _)| q).collect();
    let picked = g.gather_rows(centers, &queries)?;
    let target: Vec<Vec<f64>> = m.pairs.iter().map(|&(_, p)| points[p].to_vec()).collect();
    let target = g.constant(Matrix::from_f64_rows(&target)?);
    let diff = g.sub(picked, target)?;
    let abs = g.abs(diff);
    Ok(g.sum(abs))
}

/// Density branch: one nonnegative mass per instance token, spread over the
/// grid with the same truncated kernel used for the target map.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityHead {
    pub proj: Linear,
}

impl DensityHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &RngStream, dim: usize) -> Self {
        Self { proj: Linear::new(store, rng, "den.proj", 2 * dim, 1) }
    }

    /// `tokens` is `K x d`, `prompt` is `1 x d`; returns `(H*W) x 1`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        tokens: Var,
        prompt: Var,
        plan: Arc<SplatPlan>,
    ) -> Result<Var, ModelError> {
        let k = g.shape(tokens).0;
        let ones = g.constant(Matrix::filled(k, 1, T::one()));
        let tiled = g.matmul(ones, prompt)?;
        let gated = g.mul(tokens, tiled)?;
        let both = g.concat_cols(&[tokens, gated])?;
        let raw = self.proj.forward(g, bind, both)?;
        let mass = g.relu(raw);
        Ok(g.splat(mass, plan)?)
    }
}

/// Kernel weights of every instance in `scene`, in instance order.
pub fn splat_plan(scene: &Scene, sigma: f64) -> SplatPlan {
    let [rows, cols] = scene.grid;
    SplatPlan {
        cells: rows * cols,
        weights: scene.instances.iter().map(|i| kernel_weights(i.center, sigma, rows, cols)).collect(),
    }
}

/// Mean squared error between two maps of identical shape.
pub fn density_loss<T: Scalar>(g: &mut Graph<T>, predicted: Var, target: Var) -> Result<Var, ModelError> {
    if g.shape(predicted) != g.shape(target) {
        let (a, b) = (g.shape(predicted), g.shape(target));
        return Err(ModelError::Contract(format!("density shapes differ: {a:?} vs {b:?}")));
    }
    let diff = g.sub(predicted, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub share: f64,
    pub div: f64,
    pub den: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self { cls: cfg.lambda_cls, share: cfg.lambda_share, div: cfg.lambda_div, den: cfg.lambda_den }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 5.0, share: 2.0, div: 0.01, den: 200.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub loc: Var,
    pub den: Var,
    pub share: Var,
    pub div: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub den: f64,
    pub share: f64,
    pub div: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(w: &LossWeights, cls: f64, loc: f64, den: f64, share: f64, div: f64) -> Self {
        let total = w.cls * cls + loc + w.den * den + w.share * share + w.div * div;
        Self { cls, loc, den, share, div, total }
    }
}

/// Weighted total; any non-finite part aborts with the part's name.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    parts: &LossParts,
    w: &LossWeights,
    step: usize,
) -> Result<(Var, LossBreakdown), ModelError> {
    let named = [("L_cls", parts.cls), ("L_loc", parts.loc), ("L_den", parts.den), ("L_share", parts.share), ("L_div", parts.div)];
    for (term, v) in named {
        if !g.scalar_value(v).as_f64().is_finite() {
            return Err(ModelError::NonFinite { term, step });
        }
    }
    let terms = [
        g.scale(parts.cls, T::of(w.cls)),
        parts.loc,
        g.scale(parts.den, T::of(w.den)),
        g.scale(parts.share, T::of(w.share)),
        g.scale(parts.div, T::of(w.div)),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let v = |x: Var| g.scalar_value(x).as_f64();
    let mut breakdown = LossBreakdown::combine(w, v(parts.cls), v(parts.loc), v(parts.den), v(parts.share), v(parts.div));
    breakdown.total = v(total);
    if !breakdown.total.is_finite() {
        return Err(ModelError::NonFinite { term: "total", step });
    }
    Ok((total, breakdown))
}

/// Number of scores strictly above `tau`.
pub fn count<T: Scalar>(scores: &[T], tau: f64) -> usize {
    scores.iter().filter(|s| s.as_f64() > tau).count()
}
