//! Synthetic scenes of two confusable categories plus distractors.
//!
//! A scene is an abstract feature field: each instance has a center in grid
//! cell units and a feature vector `base ⊕ attribute + noise`. Categories of
//! one family share the base descriptor; their attribute descriptors sit on
//! a ring so that adjacent variants are exactly `attribute_separation` apart.

mod density;
mod generate;
mod io;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use density::{kernel_weights, render_density, DensityMap};
pub use generate::{generate_scene, split_counts, SceneGenerator};
pub use io::{read_scene, scene_from_json, scene_to_json, write_scene};

use crate::config::Config;
use crate::tensor::RngStream;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot place {requested} instances on a grid of {cells} cells")]
    Capacity { requested: usize, cells: usize },
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("malformed category id {0:?} (expected fNN.aN)")]
    BadCategoryId(String),
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `(family, attribute)` pair, written `f03.a2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategoryId {
    pub family: usize,
    pub attribute: usize,
}

impl CategoryId {
    pub fn new(family: usize, attribute: usize) -> Self {
        Self { family, attribute }
    }

    pub fn family_token(&self) -> String {
        format!("f{:02}", self.family)
    }

    pub fn attribute_token(&self) -> String {
        format!("a{}", self.attribute)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{:02}.a{}", self.family, self.attribute)
    }
}

impl FromStr for CategoryId {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SceneError::BadCategoryId(s.to_string());
        let (fam, attr) = s.split_once('.').ok_or_else(bad)?;
        let family = fam.strip_prefix('f').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let attribute = attr.strip_prefix('a').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        Ok(Self { family, attribute })
    }
}

/// Descriptors of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySpec {
    pub id: CategoryId,
    pub base: Vec<f64>,
    pub attribute: Vec<f64>,
    pub separation: f64,
}

impl CategorySpec {
    /// `base ⊕ attribute`, the noise-free instance feature.
    pub fn descriptor(&self) -> Vec<f64> {
        self.base.iter().chain(&self.attribute).copied().collect()
    }
}

/// Fixed category vocabulary derived from `(world_seed, config)`.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    bases: Vec<Vec<f64>>,
    attributes: Vec<Vec<f64>>,
    separation: f64,
}

impl World {
    pub fn new(cfg: &Config) -> Result<Self, SceneError> {
        use rand_distr::{Distribution, StandardNormal};

        let count = cfg.attributes;
        // chord between adjacent ring points = 2ρ sin(π/A)
        let radius = cfg.attribute_separation / (2.0 * (std::f64::consts::PI / count as f64).sin());
        if radius > 1.0 + 1e-12 {
            return Err(SceneError::Config(format!(
                "attribute separation {} needs ring radius {radius:.3} > 1 with {count} variants",
                cfg.attribute_separation
            )));
        }
        let stream = RngStream::new(cfg.world_seed, "world");
        let mut rng = stream.child("bases").rng();
        let bases = (0..cfg.families)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.base_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(v)
            })
            .collect();

        let mut rng = stream.child("attribute-frame").rng();
        let mut frame: Vec<Vec<f64>> = Vec::new();
        while frame.len() < 3 {
            let mut v: Vec<f64> = (0..cfg.attr_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &frame {
                let d = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-6 {
                frame.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let radius = radius.min(1.0);
        let axial = (1.0 - radius * radius).max(0.0).sqrt();
        let attributes = (0..count)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                (0..cfg.attr_dim)
                    .map(|i| axial * frame[0][i] + radius * (angle.cos() * frame[1][i] + angle.sin() * frame[2][i]))
                    .collect()
            })
            .collect();
        Ok(Self { bases, attributes, separation: cfg.attribute_separation })
    }

    pub fn families(&self) -> usize {
        self.bases.len()
    }

    pub fn attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn category(&self, id: CategoryId) -> Result<CategorySpec, SceneError> {
        let base = self.bases.get(id.family).ok_or_else(|| SceneError::UnknownCategory(id.to_string()))?;
        let attribute =
            self.attributes.get(id.attribute).ok_or_else(|| SceneError::UnknownCategory(id.to_string()))?;
        Ok(CategorySpec { id, base: base.clone(), attribute: attribute.clone(), separation: self.separation })
    }

    pub fn category_by_name(&self, name: &str) -> Result<CategorySpec, SceneError> {
        self.category(name.parse()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `(row, col)` in cell units; the containing cell is the floor.
    pub center: [f64; 2],
    pub category: String,
    pub features: Vec<f64>,
}

impl Instance {
    pub fn cell(&self) -> (usize, usize) {
        (self.center[0].floor() as usize, self.center[1].floor() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// `[rows, cols]`.
    pub grid: [usize; 2],
    pub positive_category: String,
    pub negative_category: String,
    pub instances: Vec<Instance>,
}

/// Number of exemplar vectors per category prompt.
pub const EXEMPLARS: usize = 3;

impl Scene {
    pub fn count(&self, category: &str) -> usize {
        self.instances.iter().filter(|i| i.category == category).count()
    }

    pub fn positive_count(&self) -> usize {
        self.count(&self.positive_category)
    }

    pub fn negative_count(&self) -> usize {
        self.count(&self.negative_category)
    }

    pub fn distractor_count(&self) -> usize {
        self.instances.len() - self.positive_count() - self.negative_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.first().map(|i| i.features.len()).unwrap_or(0)
    }

    /// Same scene with the two target roles exchanged.
    pub fn swapped(&self) -> Scene {
        Scene {
            positive_category: self.negative_category.clone(),
            negative_category: self.positive_category.clone(),
            ..self.clone()
        }
    }

    /// Instance indices sorted by `(row, col)` center.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.instances.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ca, cb) = (self.instances[a].center, self.instances[b].center);
            ca[0].total_cmp(&cb[0]).then(ca[1].total_cmp(&cb[1]))
        });
        idx
    }

    /// Three exemplar feature vectors of `category`: its instances in
    /// canonical order, cycled when fewer than three exist.
    pub fn exemplars(&self, category: &str) -> Vec<Vec<f64>> {
        let members: Vec<&Instance> = self
            .canonical_order()
            .into_iter()
            .map(|i| &self.instances[i])
            .filter(|i| i.category == category)
            .collect();
        if members.is_empty() {
            return Vec::new();
        }
        (0..EXEMPLARS).map(|k| members[k % members.len()].features.clone()).collect()
    }

    /// Absent variant of the target family that continues the ring step from
    /// the positive to the negative attribute.
    pub fn irrelevant_category(&self, attributes: usize) -> Result<String, SceneError> {
        let pos: CategoryId = self.positive_category.parse()?;
        let neg: CategoryId = self.negative_category.parse()?;
        let a = attributes as isize;
        let step = (neg.attribute as isize - pos.attribute as isize).rem_euclid(a);
        let attribute = (neg.attribute as isize + step).rem_euclid(a) as usize;
        let id = CategoryId::new(neg.family, attribute).to_string();
        if id == self.positive_category || id == self.negative_category || self.count(&id) > 0 {
            return Err(SceneError::UnknownCategory(format!("no absent sibling for {}", self.scene_id)));
        }
        Ok(id)
    }

    /// Structural invariants; used after parsing and in tests.
    pub fn validate(&self) -> Result<(), SceneError> {
        let schema = |pointer: String, message: &str| SceneError::Schema { pointer, message: message.to_string() };
        if self.positive_category == self.negative_category {
            return Err(schema("/negative_category".into(), "must differ from positive_category"));
        }
        let dim = self.feature_dim();
        for (k, inst) in self.instances.iter().enumerate() {
            let [r, c] = inst.center;
            if !(r >= 0.0 && r < self.grid[0] as f64 && c >= 0.0 && c < self.grid[1] as f64) {
                return Err(schema(format!("/instances/{k}/center"), "center outside grid"));
            }
            if inst.features.len() != dim {
                return Err(schema(format!("/instances/{k}/features"), "inconsistent feature length"));
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_ids_round_trip() {
        let id = CategoryId::new(3, 2);
        assert_eq!(id.to_string(), "f03.a2");
        assert_eq!("f03.a2".parse::<CategoryId>().unwrap(), id);
        assert!("apple".parse::<CategoryId>().is_err());
    }

    #[test]
    fn adjacent_variants_are_separated_exactly() {
        let cfg = Config { attribute_separation: 0.35, ..Config::default() };
        let world = World::new(&cfg).unwrap();
        let a = world.category(CategoryId::new(1, 2)).unwrap();
        let b = world.category(CategoryId::new(1, 3)).unwrap();
        assert_eq!(a.base, b.base);
        let dist: f64 = a.attribute.iter().zip(&b.attribute).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((dist - 0.35).abs() < 1e-12);
        for v in [&a.base, &a.attribute] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_separation_is_rejected() {
        let cfg = Config { attribute_separation: 1.5, ..Config::default() };
        assert!(matches!(World::new(&cfg), Err(SceneError::Config(_))));
    }

    #[test]
    fn irrelevant_category_continues_the_ring() {
        let scene = Scene {
            scene_id: "s".into(),
            grid: [4, 4],
            positive_category: "f01.a0".into(),
            negative_category: "f01.a5".into(),
            instances: vec![],
        };
        assert_eq!(scene.irrelevant_category(6).unwrap(), "f01.a4");
        let scene = Scene { negative_category: "f01.a1".into(), ..scene };
        assert_eq!(scene.irrelevant_category(6).unwrap(), "f01.a2");
    }
}
