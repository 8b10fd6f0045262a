//! Scene JSON: `{scene_id, grid, positive_category, negative_category, instances}`.
//!
//! Floats are written with 17 significant digits so that reading a written
//! scene reproduces it exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::scene::{Instance, Scene, SceneError};

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn scene_to_json(scene: &Scene) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"scene_id\": {},", fmt_str(&scene.scene_id));
    let _ = writeln!(out, "  \"grid\": [{}, {}],", scene.grid[0], scene.grid[1]);
    let _ = writeln!(out, "  \"positive_category\": {},", fmt_str(&scene.positive_category));
    let _ = writeln!(out, "  \"negative_category\": {},", fmt_str(&scene.negative_category));
    out.push_str("  \"instances\": [");
    for (k, inst) in scene.instances.iter().enumerate() {
        out.push_str(if k == 0 { "\n" } else { ",\n" });
        let features: Vec<String> = inst.features.iter().map(|&x| fmt_f64(x)).collect();
        let _ = write!(
            out,
            "    {{\"center\": [{}, {}], \"category\": {}, \"features\": [{}]}}",
            fmt_f64(inst.center[0]),
            fmt_f64(inst.center[1]),
            fmt_str(&inst.category),
            features.join(", ")
        );
    }
    if !scene.instances.is_empty() {
        out.push_str("\n  ");
    }
    out.push_str("]\n}\n");
    out
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Schema { pointer: pointer.into(), message: message.into() }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, base: &str) -> Result<&'a Value, SceneError> {
    obj.get(key).ok_or_else(|| schema(format!("{base}/{key}"), "missing field"))
}

fn string(v: &Value, pointer: &str) -> Result<String, SceneError> {
    v.as_str().map(str::to_string).ok_or_else(|| schema(pointer, "expected a string"))
}

fn number(v: &Value, pointer: &str) -> Result<f64, SceneError> {
    v.as_f64().ok_or_else(|| schema(pointer, "expected a number"))
}

fn pair(v: &Value, pointer: &str) -> Result<[f64; 2], SceneError> {
    let arr = v.as_array().ok_or_else(|| schema(pointer, "expected a two-element array"))?;
    if arr.len() != 2 {
        return Err(schema(pointer, "expected a two-element array"));
    }
    Ok([number(&arr[0], &format!("{pointer}/0"))?, number(&arr[1], &format!("{pointer}/1"))?])
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let root: Value = serde_json::from_str(text).map_err(|e| SceneError::Json(e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| schema("", "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "scene_id" | "grid" | "positive_category" | "negative_category" | "instances") {
            return Err(schema(format!("/{key}"), "unknown field"));
        }
    }
    let scene_id = string(field(obj, "scene_id", "")?, "/scene_id")?;
    let grid_raw = pair(field(obj, "grid", "")?, "/grid")?;
    let mut grid = [0usize; 2];
    for (k, g) in grid_raw.iter().enumerate() {
        if *g < 1.0 || g.fract() != 0.0 {
            return Err(schema(format!("/grid/{k}"), "expected a positive integer"));
        }
        grid[k] = *g as usize;
    }
    let positive_category = string(field(obj, "positive_category", "")?, "/positive_category")?;
    let negative_category = string(field(obj, "negative_category", "")?, "/negative_category")?;
    let list = field(obj, "instances", "")?.as_array().ok_or_else(|| schema("/instances", "expected an array"))?;
    let mut instances = Vec::with_capacity(list.len());
    for (k, item) in list.iter().enumerate() {
        let base = format!("/instances/{k}");
        let o = item.as_object().ok_or_else(|| schema(base.clone(), "expected an object"))?;
        let center = pair(field(o, "center", &base)?, &format!("{base}/center"))?;
        let category = string(field(o, "category", &base)?, &format!("{base}/category"))?;
        let feats = field(o, "features", &base)?
            .as_array()
            .ok_or_else(|| schema(format!("{base}/features"), "expected an array"))?;
        let features = feats
            .iter()
            .enumerate()
            .map(|(j, v)| number(v, &format!("{base}/features/{j}")))
            .collect::<Result<Vec<_>, _>>()?;
        instances.push(Instance { center, category, features });
    }
    let scene = Scene { scene_id, grid, positive_category, negative_category, instances };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_json(scene))
        .map_err(|source| SceneError::Io { path: path.display().to_string(), source })
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SceneError::Io { path: path.display().to_string(), source })?;
    scene_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::scene::generate_scene;
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    const FIXTURE: &str = r#"{
        "scene_id": "fixture-1",
        "grid": [8, 8],
        "positive_category": "f00.a0",
        "negative_category": "f00.a1",
        "instances": [
            {"center": [1.5, 2.5], "category": "f00.a0", "features": [0.25, -1.0, 3]},
            {"center": [6.0, 0.5], "category": "f00.a1", "features": [1e-3, 0.5, -0.125]}
        ]
    }"#;

    #[test]
    fn fixture_parses() {
        let scene = scene_from_json(FIXTURE).unwrap();
        assert_eq!(scene.instances.len(), 2);
        assert_eq!(scene.positive_count(), 1);
        assert_eq!(scene.instances[1].features, vec![1e-3, 0.5, -0.125]);
    }

    #[test]
    fn missing_positive_category_points_at_field() {
        let text = FIXTURE.replace("\"positive_category\": \"f00.a0\",", "");
        match scene_from_json(&text) {
            Err(SceneError::Schema { pointer, .. }) => assert_eq!(pointer, "/positive_category"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_feature_points_into_array() {
        let text = FIXTURE.replace("[1e-3, 0.5, -0.125]", "[1e-3, \"x\", -0.125]");
        match scene_from_json(&text) {
            Err(SceneError::Schema { pointer, .. }) => assert_eq!(pointer, "/instances/1/features/1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn generated_scene_round_trips_through_a_file() {
        let scene = generate_scene(&Config::default(), &RngStream::new(4, "io"), "rt").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.json");
        write_scene(&path, &scene).unwrap();
        assert_eq!(read_scene(&path).unwrap(), scene);
    }

    proptest! {
        #[test]
        fn floats_survive_seventeen_digit_text(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(x);
            let back: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
