use countex_core::heads::count;
use countex_core::scene::{generate_scene, Scene};
use countex_core::tensor::{Graph, RngStream};
use countex_core::train::{
    build_prompts, evaluate, metrics, run_modality_ablation, sample_batch, Adam, ModalityMask, Model, SceneRecord,
};
use countex_core::Config;
use proptest::prelude::*;

fn small() -> Config {
    Config {
        grid_rows: 12,
        grid_cols: 12,
        count_min: 2,
        count_max: 6,
        distractor_max: 2,
        queries: 16,
        dropout: 0.1,
        ..Config::default()
    }
}

fn scenes(cfg: &Config, n: usize, tag: &str) -> Vec<Scene> {
    (0..n)
        .map(|i| generate_scene(cfg, &RngStream::new(cfg.world_seed, tag).child(i.to_string()), &format!("{tag}-{i}")).unwrap())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine between every positive/negative instance pair.
fn paired_similarity(scenes: &[Scene]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in scenes {
        for a in s.instances.iter().filter(|i| i.category == s.positive_category) {
            for b in s.instances.iter().filter(|i| i.category == s.negative_category) {
                total += cosine(&a.features, &b.features);
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn confusability_falls_as_separation_grows() {
    let levels = [0.05, 0.2, 0.5, 0.8, 1.0];
    let sims: Vec<f64> = levels
        .iter()
        .map(|&sep| paired_similarity(&scenes(&Config { attribute_separation: sep, ..small() }, 100, "conf")))
        .collect();
    for w in sims.windows(2) {
        assert!(w[1] < w[0], "{sims:?}");
    }
}

#[test]
fn untrained_gate_makes_the_negative_prompt_inert() {
    // gate starts at zero, so Q~pos = LN(Qpos) whether or not a negative is given
    let cfg = small();
    let model = Model::<f64>::new(&cfg).unwrap();
    for s in scenes(&cfg, 4, "inert") {
        let with = model.predict(&s, &build_prompts(&s, &s.positive_category, &s.negative_category, ModalityMask::POS_NEG_TEXT)).unwrap();
        let without = model.predict(&s, &build_prompts(&s, &s.positive_category, &s.negative_category, ModalityMask::POS_ONLY)).unwrap();
        assert_eq!(with, without);
    }
}

#[test]
fn evaluation_passes_are_bit_identical() {
    let cfg = small();
    let model = Model::<f64>::new(&cfg).unwrap();
    let set = scenes(&cfg, 6, "det");
    assert_eq!(run_modality_ablation(&model, &set).unwrap(), run_modality_ablation(&model, &set).unwrap());
}

#[test]
fn swapping_twice_reproduces_the_original_run() {
    let cfg = small();
    let model = Model::<f64>::new(&cfg).unwrap();
    let set = scenes(&cfg, 6, "swap");
    let twice: Vec<Scene> = set.iter().map(|s| s.swapped().swapped()).collect();
    assert_eq!(twice, set);
    let a = evaluate(&model, &set, ModalityMask::ALL).unwrap();
    let b = evaluate(&model, &twice, ModalityMask::ALL).unwrap();
    assert_eq!(a, b);
}

#[test]
fn instance_order_does_not_change_predictions() {
    let cfg = small();
    let model = Model::<f64>::new(&cfg).unwrap();
    for s in scenes(&cfg, 3, "order") {
        let mut shuffled = s.clone();
        shuffled.instances.reverse();
        shuffled.instances.rotate_left(2);
        let prompts = build_prompts(&s, &s.positive_category, &s.negative_category, ModalityMask::ALL);
        let a = model.predict(&s, &prompts).unwrap();
        let b = model.predict(&shuffled, &prompts).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.centers.iter().zip(&b.centers) {
            assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        }
    }
}

/// Batch-mean loss of `batch` with dropout off.
fn batch_loss(model: &Model<f64>, set: &[Scene], batch: &[countex_core::train::Sample]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let scene = &set[s.scene];
        let (target, other) = if s.swapped {
            (&scene.negative_category, &scene.positive_category)
        } else {
            (&scene.positive_category, &scene.negative_category)
        };
        let prompts = build_prompts(scene, target, other, s.mask);
        let mut g = Graph::new();
        let bind = model.store.bind(&mut g);
        let (_, b, _) = model.scene_loss(&mut g, &bind, scene, &prompts, None, 0).unwrap();
        total += b.total;
    }
    total / batch.len() as f64
}

#[test]
fn fixed_batch_loss_decreases_for_most_seeds() {
    let mut decreased = 0;
    let mut trace = Vec::new();
    for seed in 0..5u64 {
        let cfg = Config { seed, threads: 1, ..Config::default() };
        let set = scenes(&cfg, cfg.batch_size, &format!("fixed-{seed}"));
        let batch = sample_batch(&cfg, set.len(), 0);
        let mut model = Model::<f64>::new(&cfg).unwrap();
        model.encoder.feature_norm = countex_core::encoder::FeatureNorm::fit(&set, cfg.feature_dim());
        let mut adam = Adam::new(&model.store, &cfg);
        let before = batch_loss(&model, &set, &batch);
        for step in 0..50 {
            let (grads, _) = countex_core::train::batch_gradient(&model, &set, &batch, step).unwrap();
            adam.update(&mut model.store, &grads);
        }
        let after = batch_loss(&model, &set, &batch);
        trace.push((before, after));
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "{trace:?}");
}

fn record(gt: usize, pred: usize) -> SceneRecord {
    SceneRecord { scene_id: String::new(), gt, pred }
}

proptest! {
    #[test]
    fn mae_never_exceeds_rmse(pairs in prop::collection::vec((1usize..60, 0usize..80), 1..40)) {
        let recs: Vec<SceneRecord> = pairs.iter().map(|&(g, p)| record(g, p)).collect();
        let (mae, rmse, nae, _) = metrics(&recs);
        prop_assert!(mae <= rmse + 1e-12);
        prop_assert!(nae >= 0.0);
    }

    #[test]
    fn count_is_monotone_in_tau(scores in prop::collection::vec(0.0f64..1.0, 0..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(count(&scores, hi) <= count(&scores, lo));
    }
}
