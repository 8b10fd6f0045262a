use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::scene::{CategoryId, Instance, Scene, SceneError, World};
use crate::tensor::RngStream;

/// Scene sampler bound to one configuration and its category vocabulary.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    cfg: Config,
    world: World,
}

impl SceneGenerator {
    pub fn new(cfg: &Config) -> Result<Self, SceneError> {
        cfg.validate().map_err(|e| SceneError::Config(e.to_string()))?;
        Ok(Self { cfg: cfg.clone(), world: World::new(cfg)? })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Samples one scene. A pure function of `(config, rng, scene_id)`.
    pub fn generate(&self, rng: &RngStream, scene_id: &str) -> Result<Scene, SceneError> {
        let cfg = &self.cfg;
        let mut r = rng.rng();
        let attrs = cfg.attributes;

        let family = r.random_range(0..cfg.families);
        let pos_attr = r.random_range(0..attrs);
        let step = if r.random_bool(0.5) { 1 } else { attrs - 1 };
        let neg_attr = (pos_attr + step) % attrs;
        let mut distractor_family = r.random_range(0..cfg.families - 1);
        if distractor_family >= family {
            distractor_family += 1;
        }
        let distractor_attr = r.random_range(0..attrs);

        let positive = CategoryId::new(family, pos_attr);
        let negative = CategoryId::new(family, neg_attr);
        let distractor = CategoryId::new(distractor_family, distractor_attr);

        let n_pos = r.random_range(cfg.count_min..=cfg.count_max);
        let n_neg = r.random_range(cfg.count_min..=cfg.count_max);
        let n_dis = r.random_range(cfg.distractor_min..=cfg.distractor_max);
        let total = n_pos + n_neg + n_dis;
        let cells = cfg.grid_rows * cfg.grid_cols;
        if total > cells {
            return Err(SceneError::Capacity { requested: total, cells });
        }

        // partial Fisher-Yates over all cells
        let mut free: Vec<usize> = (0..cells).collect();
        for i in 0..total {
            let j = r.random_range(i..cells);
            free.swap(i, j);
        }

        let noise = Normal::new(0.0, cfg.feature_noise).map_err(|e| SceneError::Config(e.to_string()))?;
        let mut instances = Vec::with_capacity(total);
        let plan = [(positive, n_pos), (negative, n_neg), (distractor, n_dis)];
        let mut next_cell = 0;
        for (category, n) in plan {
            let descriptor = self.world.category(category)?.descriptor();
            let name = category.to_string();
            for _ in 0..n {
                let cell = free[next_cell];
                next_cell += 1;
                let row = (cell / cfg.grid_cols) as f64 + r.random_range(0.05..0.95);
                let col = (cell % cfg.grid_cols) as f64 + r.random_range(0.05..0.95);
                let features = descriptor.iter().map(|&x| x + noise.sample(&mut r)).collect();
                instances.push(Instance { center: [row, col], category: name.clone(), features });
            }
        }
        instances.shuffle(&mut r);

        Ok(Scene {
            scene_id: scene_id.to_string(),
            grid: [cfg.grid_rows, cfg.grid_cols],
            positive_category: positive.to_string(),
            negative_category: negative.to_string(),
            instances,
        })
    }
}

/// One-shot generation without keeping the generator around.
pub fn generate_scene(cfg: &Config, rng: &RngStream, scene_id: &str) -> Result<Scene, SceneError> {
    SceneGenerator::new(cfg)?.generate(rng, scene_id)
}

/// Splits `count` items by `(train, val, test)` ratios: train and val are
/// floored, test takes the remainder.
pub fn split_counts(count: usize, train: f64, val: f64) -> (usize, usize, usize) {
    let floor = |r: f64| ((count as f64) * r + 1e-9).floor() as usize;
    let n_train = floor(train).min(count);
    let n_val = floor(val).min(count - n_train);
    (n_train, n_val, count - n_train - n_val)
}
