//! Training loop, threshold calibration, metrics and ablation protocols.

mod eval;
mod model;

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;

pub use eval::{
    evaluate, loss_curve_csv, metrics, per_scene_csv, predictions_csv, report_csv, reports_from_csv,
    run_irrelevant_negative, run_modality_ablation, run_swap_test, EvalReport, SceneRecord, SwapReport,
    TAU_GRID,
};
pub use model::{build_prompts, Checkpoint, ForwardPass, ModalityMask, Model, NamedParam, ScenePass};

use crate::config::Config;
use crate::encoder::FeatureNorm;
use crate::error::ModelError;
use crate::heads::LossBreakdown;
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tensor::{Graph, Matrix, ParamStore, RngStream};

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &Config) -> Self {
        let zeros: Vec<Matrix<T>> = store.ids().map(|id| Matrix::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Matrix<T>]) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One training sample: which scene, which roles, which prompt parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub swapped: bool,
    pub mask: ModalityMask,
}

/// Draws the `batch` samples of `step`; a pure function of `(config, step)`.
pub fn sample_batch(cfg: &Config, scenes: usize, step: usize) -> Vec<Sample> {
    let mut rng = RngStream::new(cfg.seed, "batch").child(step.to_string()).rng();
    (0..cfg.batch_size)
        .map(|_| {
            let scene = rng.random_range(0..scenes);
            let swapped = rng.random_bool(cfg.p_swap);
            let pos_exemplars = rng.random_bool(cfg.p_pos_exemplars);
            let neg_text = rng.random_bool(cfg.p_neg_text);
            let neg_exemplars = rng.random_bool(cfg.p_neg_exemplars);
            Sample { scene, swapped, mask: ModalityMask { pos_exemplars, neg_text, neg_exemplars } }
        })
        .collect()
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    /// Batch-mean losses, one entry per step.
    pub curve: Vec<LossBreakdown>,
}

/// Gradient of the batch-mean loss at the current parameters.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    scenes: &[Scene],
    batch: &[Sample],
    step: usize,
) -> Result<(Vec<Matrix<T>>, LossBreakdown), ModelError> {
    let cfg = &model.config;
    let per_item: Vec<Result<(Vec<Matrix<T>>, LossBreakdown), ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(b, s)| {
            let scene = &scenes[s.scene];
            let (target, other) = if s.swapped {
                (&scene.negative_category, &scene.positive_category)
            } else {
                (&scene.positive_category, &scene.negative_category)
            };
            let prompts = build_prompts(scene, target, other, s.mask);
            let mut rng = RngStream::new(cfg.seed, "dropout").child(format!("{step}/{b}")).rng();
            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let (total, breakdown, _) = model.scene_loss(&mut g, &bind, scene, &prompts, Some(&mut rng), step)?;
            let grads = g.backward(total)?;
            Ok((bind.collect(&model.store, &grads), breakdown))
        })
        .collect();
    // reduce in batch order so the result does not depend on scheduling
    let inv = T::one() / T::of(batch.len() as f64);
    let mut sum: Option<Vec<Matrix<T>>> = None;
    let mut acc = [0.0f64; 6];
    for item in per_item {
        let (grads, b) = item?;
        for (a, v) in acc.iter_mut().zip([b.cls, b.loc, b.den, b.share, b.div, b.total]) {
            *a += v;
        }
        match &mut sum {
            None => sum = Some(grads),
            Some(s) => {
                for (x, y) in s.iter_mut().zip(&grads) {
                    x.add_assign(y)?;
                }
            }
        }
    }
    let grads = sum.unwrap_or_default().into_iter().map(|m| m.scale(inv)).collect();
    let n = batch.len() as f64;
    let mean = LossBreakdown {
        cls: acc[0] / n,
        loc: acc[1] / n,
        den: acc[2] / n,
        share: acc[3] / n,
        div: acc[4] / n,
        total: acc[5] / n,
    };
    Ok((grads, mean))
}

fn check_disjoint(train: &[Scene], val: &[Scene]) -> Result<(), ModelError> {
    let ids: HashSet<&str> = train.iter().map(|s| s.scene_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| ids.contains(s.scene_id.as_str())) {
        return Err(ModelError::Contract(format!("scene {} is in both train and val", s.scene_id)));
    }
    Ok(())
}

/// Trains from the configured initialization, then calibrates `tau` on `val`.
pub fn train<T: Scalar>(cfg: &Config, train: &[Scene], val: &[Scene]) -> Result<TrainOutcome<T>, ModelError> {
    train_with(cfg, train, val, |_, _| {})
}

/// As [`train`], calling `progress(step, losses)` after every update.
pub fn train_with<T: Scalar>(
    cfg: &Config,
    train: &[Scene],
    val: &[Scene],
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome<T>, ModelError> {
    check_disjoint(train, val)?;
    let mut model = Model::<T>::new(cfg)?;
    model.encoder.feature_norm = FeatureNorm::fit(train, cfg.feature_dim());
    let mut curve = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 && train.is_empty() {
        return Err(ModelError::Contract("no training scenes".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let mut adam = Adam::new(&model.store, cfg);
    for step in 0..cfg.steps {
        let batch = sample_batch(cfg, train.len(), step);
        let (grads, losses) = pool.install(|| batch_gradient(&model, train, &batch, step))?;
        adam.update(&mut model.store, &grads);
        progress(step, &losses);
        curve.push(losses);
    }
    if !val.is_empty() {
        model.tau = pool.install(|| calibrate_tau(&model, val))?;
    }
    Ok(TrainOutcome { model, curve })
}

/// Grid value of `tau` minimizing validation MAE pooled over the four
/// ablation masks; ties go to the smaller threshold.
pub fn calibrate_tau<T: Scalar>(model: &Model<T>, val: &[Scene]) -> Result<f64, ModelError> {
    let jobs: Vec<(usize, ModalityMask)> =
        (0..val.len()).flat_map(|i| ModalityMask::ABLATION.into_iter().map(move |m| (i, m))).collect();
    let scored: Vec<Result<(Vec<f64>, usize), ModelError>> = jobs
        .par_iter()
        .map(|&(i, mask)| {
            let s = &val[i];
            let prompts = build_prompts(s, &s.positive_category, &s.negative_category, mask);
            Ok((model.predict(s, &prompts)?.scores, s.positive_count()))
        })
        .collect();
    let scored = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut best = (f64::INFINITY, TAU_GRID[0]);
    for &tau in TAU_GRID.iter() {
        let err: f64 = scored
            .iter()
            .map(|(scores, gt)| (crate::heads::count(scores, tau) as f64 - *gt as f64).abs())
            .sum();
        if err < best.0 {
            best = (err, tau);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    fn tiny_cfg() -> Config {
        Config {
            grid_rows: 12,
            grid_cols: 12,
            count_min: 2,
            count_max: 5,
            distractor_max: 2,
            queries: 12,
            prototypes: 4,
            steps: 3,
            batch_size: 2,
            ..Config::default()
        }
    }

    fn scenes(cfg: &Config, n: usize, tag: &str) -> Vec<Scene> {
        (0..n)
            .map(|i| generate_scene(cfg, &RngStream::new(cfg.seed, tag).child(i.to_string()), &format!("{tag}-{i}")).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = Config { steps: 0, ..tiny_cfg() };
        let out = train::<f64>(&cfg, &scenes(&cfg, 2, "tr"), &[]).unwrap();
        assert_eq!(out.model.store.iter().collect::<Vec<_>>(), Model::<f64>::new(&cfg).unwrap().store.iter().collect::<Vec<_>>());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_cfg();
        let tr = scenes(&cfg, 4, "tr");
        let va = scenes(&cfg, 2, "va");
        let a = train::<f64>(&cfg, &tr, &va).unwrap();
        let b = train::<f64>(&Config { threads: 1, ..cfg.clone() }, &tr, &va).unwrap();
        assert_eq!(a.model.checkpoint().params, b.model.checkpoint().params);
        assert_eq!(a.model.tau, b.model.tau);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let cfg = tiny_cfg();
        let tr = scenes(&cfg, 2, "tr");
        assert!(matches!(train::<f64>(&cfg, &tr, &tr[..1]), Err(ModelError::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = tiny_cfg();
        let out = train::<f64>(&cfg, &scenes(&cfg, 3, "tr"), &scenes(&cfg, 2, "va")).unwrap();
        let ck = out.model.checkpoint();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let model = Model::<f64>::from_checkpoint(&back).unwrap();
        assert_eq!(model.checkpoint(), ck);
    }

    #[test]
    fn batch_sampling_is_reproducible() {
        let cfg = tiny_cfg();
        assert_eq!(sample_batch(&cfg, 10, 7), sample_batch(&cfg, 10, 7));
        assert_ne!(sample_batch(&cfg, 1000, 7), sample_batch(&cfg, 1000, 8));
    }
}
