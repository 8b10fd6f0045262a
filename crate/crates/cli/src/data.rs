//! Scene directories: `<data>/{train,val,test}/*.json`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use countex_core::scene::{read_scene, split_counts, write_scene, Scene, SceneGenerator};
use countex_core::tensor::RngStream;
use countex_core::Config;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:05}")
}

/// Generates `count` scenes and writes them under `out`, returning the paths
/// relative to `out`.
pub fn generate(cfg: &Config, count: usize, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let generator = SceneGenerator::new(cfg)?;
    let (n_train, n_val, _) = split_counts(count, cfg.split_train, cfg.split_val);
    let stream = RngStream::new(cfg.seed, "scenes");
    for split in SPLITS {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let split = if i < n_train {
            "train"
        } else if i < n_train + n_val {
            "val"
        } else {
            "test"
        };
        let id = scene_id(i);
        let scene = generator.generate(&stream.child(&id), &id)?;
        let rel = PathBuf::from(split).join(format!("{id}.json"));
        write_scene(&out.join(&rel), &scene)?;
        written.push(rel);
    }
    Ok(written)
}

/// Every `*.json` scene in `dir`, in file-name order; a missing directory is empty.
pub fn load_split(dir: &Path) -> anyhow::Result<Vec<Scene>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| read_scene(p).with_context(|| format!("in scene file {}", p.display())))
        .collect()
}

pub fn load(data: &Path, split: &str) -> anyhow::Result<Vec<Scene>> {
    load_split(&data.join(split))
}
