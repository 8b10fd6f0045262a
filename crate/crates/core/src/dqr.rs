//! Discriminative query refinement.
//!
//! Three stages: prototypes attend over both query sets to find what the
//! positive and negative prompts share; negative queries least aligned with
//! that shared basis have it projected out; the positive queries then attend
//! to those residuals and subtract the result through a scalar gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ProjectionMode;
use crate::error::ModelError;
use crate::scalar::Scalar;
use crate::tensor::nn::{LayerNorm, Linear, MultiHeadAttention, COSINE_EPS};
use crate::tensor::{Binding, Graph, Matrix, ParamId, ParamStore, RngStream, Var};

/// Rows whose Gram-Schmidt residual falls below this norm are dropped.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DqrShape {
    pub dim: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub exclusive: usize,
    pub dropout: f64,
    pub projection: ProjectionMode,
    pub prototype_residual: bool,
    pub refine_null_slot: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqrParams {
    pub shape: DqrShape,
    /// Raw prototypes, `r x d`.
    pub prototypes: ParamId,
    pub shared_attention: MultiHeadAttention,
    pub fuse: Linear,
    pub fuse_norm: LayerNorm,
    pub refine_attention: MultiHeadAttention,
    /// Suppression gate, `1 x 1`, starts at zero.
    pub gate: ParamId,
    pub out_norm: LayerNorm,
}

impl DqrParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &RngStream, shape: DqrShape) -> Result<Self, ModelError> {
        let (r, d) = (shape.prototypes, shape.dim);
        if r < 1 {
            return Err(ModelError::Config("at least one prototype is required".into()));
        }
        if r > d {
            return Err(ModelError::Config(format!("{r} prototypes exceed model dimension {d}")));
        }
        if !(0.0..1.0).contains(&shape.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", shape.dropout)));
        }
        // unit-norm rows at start
        let mut raw = Matrix::<T>::zeros(r, d);
        let mut prng = rng.child("dqr.prototypes").rng();
        for j in 0..r {
            let row: Vec<f64> = (0..d).map(|_| prng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (c, x) in row.iter().enumerate() {
                raw.set(j, c, T::of(x / norm));
            }
        }
        Ok(Self {
            shape,
            prototypes: store.add("dqr.prototypes", raw),
            shared_attention: MultiHeadAttention::new(store, rng, "dqr.shared", d, shape.heads, false)?,
            fuse: Linear::new(store, rng, "dqr.fuse", d, d),
            fuse_norm: LayerNorm::new(store, "dqr.fuse_norm", d),
            refine_attention: MultiHeadAttention::new(
                store,
                rng,
                "dqr.refine",
                d,
                shape.heads,
                shape.refine_null_slot,
            )?,
            gate: store.add("dqr.gate", Matrix::zeros(1, 1)),
            out_norm: LayerNorm::new(store, "dqr.out_norm", d),
        })
    }
}

/// Prototype stage outputs.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// Attention intermediate `H`.
    pub attended: Var,
    /// Fused prototypes `C = LN(Linear(H))`.
    pub fused: Var,
    /// Orthonormal basis of the fused rows.
    pub basis: Var,
    /// Rows of `C` that survived the rank check.
    pub kept: Vec<usize>,
}

/// Exclusivity scores and the selected negative queries.
#[derive(Clone, Debug, PartialEq)]
pub struct ExclusivitySelection<T> {
    pub scores: Vec<T>,
    /// Ascending.
    pub indices: Vec<usize>,
}

/// Discrete decisions taken in one forward pass. Replaying them makes the
/// pass a smooth function of its inputs, which finite-difference checks need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DqrTrace {
    pub kept: Vec<usize>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DqrOutput {
    pub refined: Var,
    pub share: Var,
    pub div: Var,
    /// `None` when the negative prompt was absent.
    pub trace: Option<DqrTrace>,
    pub bypassed: bool,
}

/// Indices of the `m` smallest scores, ties to the lower index, returned ascending.
pub fn select_smallest<T: Scalar>(scores: &[T], m: usize) -> Result<Vec<usize>, ModelError> {
    if m > scores.len() {
        return Err(ModelError::Contract(format!("cannot select {m} of {} queries", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut picked = order[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Row-wise Gram-Schmidt (two passes per row), dropping rows whose residual
/// norm is below [`RANK_TOL`]. `keep` replays an earlier rank decision.
pub fn gram_schmidt<T: Scalar>(
    g: &mut Graph<T>,
    c: Var,
    keep: Option<&[usize]>,
) -> Result<(Var, Vec<usize>), ModelError> {
    let rows = g.shape(c).0;
    let mut basis: Vec<Var> = Vec::new();
    let mut kept = Vec::new();
    for i in 0..rows {
        if let Some(k) = keep {
            if !k.contains(&i) {
                continue;
            }
        }
        let mut v = g.gather_rows(c, &[i])?;
        if !basis.is_empty() {
            let u = if basis.len() == 1 { basis[0] } else { g.concat_rows(&basis)? };
            for _ in 0..2 {
                let coeff = g.matmul_t(v, u)?;
                let proj = g.matmul(coeff, u)?;
                v = g.sub(v, proj)?;
            }
        }
        let sq = g.square(v);
        let ss = g.sum(sq);
        let norm = g.sqrt(ss);
        if keep.is_none() && g.scalar_value(norm).as_f64() < RANK_TOL {
            continue;
        }
        let inv = g.recip(norm);
        basis.push(g.scale_by(v, inv)?);
        kept.push(i);
    }
    if basis.is_empty() {
        return Err(ModelError::Contract("prototype basis has rank zero".into()));
    }
    let b = if basis.len() == 1 { basis[0] } else { g.concat_rows(&basis)? };
    Ok((b, kept))
}

/// `H = MHA(C_proto, [Qpos; Qneg])`, `C = LN(Linear(H))`, and the orthonormal basis of `C`.
pub fn identify_shared<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    params: &DqrParams,
    qpos: Var,
    qneg: Var,
    keep: Option<&[usize]>,
) -> Result<PrototypeBank, ModelError> {
    let proto = bind.var(params.prototypes);
    let both = g.concat_rows(&[qpos, qneg])?;
    let mut attended = params.shared_attention.forward(g, bind, proto, both, both)?;
    if params.shape.prototype_residual {
        attended = g.add(proto, attended)?;
    }
    let lin = params.fuse.forward(g, bind, attended)?;
    let fused = params.fuse_norm.forward(g, bind, lin)?;
    let (basis, kept) = gram_schmidt(g, fused, keep)?;
    Ok(PrototypeBank { attended, fused, basis, kept })
}

/// `-(1/r) sum_j [max_i cos(c_j, qpos_i) + max_i cos(c_j, qneg_i)]`.
pub fn shareability_loss<T: Scalar>(g: &mut Graph<T>, c: Var, qpos: Var, qneg: Var) -> Result<Var, ModelError> {
    let r = g.shape(c).0;
    let eps = T::of(COSINE_EPS);
    let cp = g.cosine_matrix(c, qpos, eps)?;
    let mp = g.row_max(cp)?;
    let cn = g.cosine_matrix(c, qneg, eps)?;
    let mn = g.row_max(cn)?;
    let both = g.add(mp, mn)?;
    let total = g.sum(both);
    Ok(g.scale(total, -T::one() / T::of(r as f64)))
}

/// `||C C^T - I||_F^2`.
pub fn diversity_loss<T: Scalar>(g: &mut Graph<T>, c_proto: Var) -> Result<Var, ModelError> {
    let r = g.shape(c_proto).0;
    let gram = g.matmul_t(c_proto, c_proto)?;
    let eye = g.constant(Matrix::identity(r));
    let diff = g.sub(gram, eye)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// `sigma_i = max_j cos(qneg_i, c_j)` computed on values.
pub fn exclusivity_scores<T: Scalar>(qneg: &Matrix<T>, fused: &Matrix<T>) -> Vec<T> {
    (0..qneg.rows())
        .map(|i| {
            (0..fused.rows())
                .map(|j| crate::tensor::nn::cosine_similarity(qneg.row(i), fused.row(j)))
                .fold(T::neg_infinity(), T::max)
        })
        .collect()
}

/// Selects the `m` least-shared negative queries and removes their shared
/// component. Returns the selection and `R_neg` (rows in ascending index order).
pub fn extract_exclusive<T: Scalar>(
    g: &mut Graph<T>,
    qneg: Var,
    bank: &PrototypeBank,
    m: usize,
    mode: ProjectionMode,
    selected: Option<&[usize]>,
) -> Result<(ExclusivitySelection<T>, Var), ModelError> {
    let n = g.shape(qneg).0;
    if m < 1 || m > n {
        return Err(ModelError::Contract(format!("exclusive count {m} outside 1..={n}")));
    }
    let scores = exclusivity_scores(g.value(qneg), g.value(bank.fused));
    let indices = match selected {
        Some(s) => s.to_vec(),
        None => select_smallest(&scores, m)?,
    };
    let picked = g.gather_rows(qneg, &indices)?;
    let projector = match mode {
        ProjectionMode::Orthonormal => bank.basis,
        ProjectionMode::Literal => bank.fused,
    };
    let coeff = g.matmul_t(picked, projector)?;
    let shared = g.matmul(coeff, projector)?;
    let residual = g.sub(picked, shared)?;
    Ok((ExclusivitySelection { scores, indices }, residual))
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = g.shape(x);
    let keep = T::of(1.0 / (1.0 - rate));
    let data = (0..rows * cols).map(|_| if rng.random_bool(rate) { T::zero() } else { keep }).collect();
    let mask = g.constant(Matrix::from_vec(rows, cols, data)?);
    Ok(g.mul(x, mask)?)
}

/// `LN(Qpos - g * Dropout(MHA(Qpos, Rneg, Rneg)))`; `rng` is `Some` only in training.
pub fn refine_queries<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    params: &DqrParams,
    qpos: Var,
    rneg: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let Some(rneg) = rneg.filter(|&r| g.shape(r).0 > 0) else {
        return Ok(params.out_norm.forward(g, bind, qpos)?);
    };
    let attended = params.refine_attention.forward(g, bind, qpos, rneg, rneg)?;
    let dropped = dropout(g, attended, params.shape.dropout, rng)?;
    let gated = g.scale_by(dropped, bind.var(params.gate))?;
    let suppressed = g.sub(qpos, gated)?;
    Ok(params.out_norm.forward(g, bind, suppressed)?)
}

/// Runs all three stages. An absent negative prompt bypasses the first two
/// and yields zero auxiliary losses.
pub fn dqr_forward<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    params: &DqrParams,
    qpos: Var,
    qneg: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
    replay: Option<&DqrTrace>,
) -> Result<DqrOutput, ModelError> {
    let Some(qneg) = qneg else {
        let refined = refine_queries(g, bind, params, qpos, None, rng)?;
        let share = g.constant(Matrix::scalar(T::zero()));
        return Ok(DqrOutput { refined, share, div: share, trace: None, bypassed: true });
    };
    let bank = identify_shared(g, bind, params, qpos, qneg, replay.map(|t| t.kept.as_slice()))?;
    let share = shareability_loss(g, bank.fused, qpos, qneg)?;
    let div = diversity_loss(g, bind.var(params.prototypes))?;
    let (selection, rneg) = extract_exclusive(
        g,
        qneg,
        &bank,
        params.shape.exclusive,
        params.shape.projection,
        replay.map(|t| t.selected.as_slice()),
    )?;
    let refined = refine_queries(g, bind, params, qpos, Some(rneg), rng)?;
    Ok(DqrOutput {
        refined,
        share,
        div,
        trace: Some(DqrTrace { kept: bank.kept, selected: selection.indices }),
        bypassed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn shape(dim: usize, r: usize, m: usize) -> DqrShape {
        DqrShape {
            dim,
            heads: 2,
            prototypes: r,
            exclusive: m,
            dropout: 0.1,
            projection: ProjectionMode::Orthonormal,
            prototype_residual: false,
            refine_null_slot: true,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn selection_example() {
        assert_eq!(select_smallest(&[0.9, 0.1, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_smallest(&[0.2, 0.2, 0.2, 0.1], 2).unwrap(), vec![0, 3]);
        assert!(select_smallest(&[0.0], 2).is_err());
    }

    #[test]
    fn diversity_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(Matrix::identity(3));
        let l = diversity_loss(&mut g, eye).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        let dup = g.leaf(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap());
        let l = diversity_loss(&mut g, dup).unwrap();
        assert_eq!(g.scalar_value(l), 2.0);
    }

    #[test]
    fn shareability_minimum_and_orthogonal_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.leaf(Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap());
        let q = g.leaf(Matrix::from_rows(&[[0.0, 2.0, 0.0], [3.0, 0.0, 0.0]]).unwrap());
        let l = shareability_loss(&mut g, c, q, q).unwrap();
        assert!((g.scalar_value(l) + 2.0).abs() < 1e-12);
        let far = g.leaf(Matrix::from_rows(&[[0.0, 0.0, 1.0]]).unwrap());
        let l = shareability_loss(&mut g, c, far, far).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn gram_schmidt_is_orthonormal_and_drops_dependent_rows() {
        let mut g = Graph::<f64>::new();
        let mut m = random(4, 6, 1);
        let copy: Vec<f64> = m.row(0).iter().map(|x| 2.0 * x).collect();
        m.row_mut(2).copy_from_slice(&copy);
        let c = g.leaf(m);
        let (b, kept) = gram_schmidt(&mut g, c, None).unwrap();
        assert_eq!(kept, vec![0, 1, 3]);
        let gram = g.value(b).matmul_t(g.value(b)).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(3)) < 1e-10);
    }

    #[test]
    fn residuals_are_orthogonal_and_projection_is_idempotent() {
        let mut store = ParamStore::<f64>::new();
        let params = DqrParams::new(&mut store, &RngStream::new(3, "dqr"), shape(8, 3, 3)).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let qp = g.leaf(random(6, 8, 4));
        let qn = g.leaf(random(6, 8, 5));
        let bank = identify_shared(&mut g, &bind, &params, qp, qn, None).unwrap();
        let (_, r) = extract_exclusive(&mut g, qn, &bank, 3, ProjectionMode::Orthonormal, None).unwrap();
        let basis = g.value(bank.basis).clone();
        let rv = g.value(r).clone();
        let dots = rv.matmul_t(&basis).unwrap();
        assert!(dots.data().iter().all(|x| x.abs() < 1e-10));
        let again = rv.zip_map(&dots.matmul(&basis).unwrap(), |a, b| a - b).unwrap();
        assert!(again.max_abs_diff(&rv) < 1e-10);
    }

    #[test]
    fn gate_off_is_layer_norm_of_positive_queries() {
        let mut store = ParamStore::<f64>::new();
        let params = DqrParams::new(&mut store, &RngStream::new(3, "dqr"), shape(8, 2, 2)).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let qp = g.leaf(random(4, 8, 6));
        let qn = g.leaf(random(4, 8, 7));
        let out = dqr_forward(&mut g, &bind, &params, qp, Some(qn), None, None).unwrap();
        let ln = params.out_norm.forward(&mut g, &bind, qp).unwrap();
        assert_eq!(g.value(out.refined), g.value(ln));
    }

    #[test]
    fn absent_negative_bypasses_with_zero_losses() {
        let mut store = ParamStore::<f64>::new();
        let params = DqrParams::new(&mut store, &RngStream::new(3, "dqr"), shape(8, 2, 2)).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let qp = g.leaf(random(4, 8, 6));
        let out = dqr_forward(&mut g, &bind, &params, qp, None, None, None).unwrap();
        assert!(out.bypassed);
        assert_eq!(g.scalar_value(out.share), 0.0);
        assert_eq!(g.scalar_value(out.div), 0.0);
    }

    #[test]
    fn too_many_prototypes_is_a_config_error() {
        let mut store = ParamStore::<f64>::new();
        assert!(DqrParams::new(&mut store, &RngStream::new(0, "dqr"), shape(4, 5, 1)).is_err());
    }
}
