use crate::scene::{CategoryId, Scene, SceneError};
use crate::tensor::Matrix;

/// Per-cell object density; total mass equals the rendered instance count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: Matrix<f64>,
}

impl DensityMap {
    pub fn mass(&self) -> f64 {
        self.grid.sum()
    }
}

/// Gaussian weights of one instance over grid cells.
///
/// The kernel is evaluated at cell centers, truncated to cells within `3σ`
/// and inside the grid, then renormalized to sum to one. When no cell center
/// falls inside the support, all mass goes to the containing cell.
pub fn kernel_weights(center: [f64; 2], sigma: f64, rows: usize, cols: usize) -> Vec<(usize, f64)> {
    let reach = 3.0 * sigma;
    let r_lo = (center[0] - reach - 0.5).floor().max(0.0) as usize;
    let r_hi = ((center[0] + reach - 0.5).ceil().max(0.0) as usize).min(rows.saturating_sub(1));
    let c_lo = (center[1] - reach - 0.5).floor().max(0.0) as usize;
    let c_hi = ((center[1] + reach - 0.5).ceil().max(0.0) as usize).min(cols.saturating_sub(1));
    let mut out = Vec::new();
    let mut total = 0.0;
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let dr = r as f64 + 0.5 - center[0];
            let dc = c as f64 + 0.5 - center[1];
            let d2 = dr * dr + dc * dc;
            if d2 <= reach * reach {
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                total += w;
                out.push((r * cols + c, w));
            }
        }
    }
    if out.is_empty() || total <= 0.0 {
        let r = (center[0].floor() as usize).min(rows - 1);
        let c = (center[1].floor() as usize).min(cols - 1);
        return vec![(r * cols + c, 1.0)];
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

/// Renders one truncated, renormalized Gaussian per instance of `category`.
pub fn render_density(scene: &Scene, category: &str, sigma: f64) -> Result<DensityMap, SceneError> {
    category.parse::<CategoryId>().map_err(|_| SceneError::UnknownCategory(category.to_string()))?;
    if !(sigma > 0.0) {
        return Err(SceneError::Config(format!("kernel sigma must be positive, got {sigma}")));
    }
    let [rows, cols] = scene.grid;
    let mut grid = Matrix::zeros(rows, cols);
    for inst in scene.instances.iter().filter(|i| i.category == category) {
        for (cell, w) in kernel_weights(inst.center, sigma, rows, cols) {
            let data = grid.data_mut();
            data[cell] += w;
        }
    }
    Ok(DensityMap { grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Instance;

    fn scene_with(centers: &[[f64; 2]], rows: usize, cols: usize) -> Scene {
        Scene {
            scene_id: "d".into(),
            grid: [rows, cols],
            positive_category: "f00.a0".into(),
            negative_category: "f00.a1".into(),
            instances: centers
                .iter()
                .map(|&center| Instance { center, category: "f00.a0".into(), features: vec![0.0; 2] })
                .collect(),
        }
    }

    #[test]
    fn empty_category_renders_zeros() {
        let scene = scene_with(&[[3.5, 3.5]], 8, 8);
        let map = render_density(&scene, "f00.a1", 1.0).unwrap();
        assert_eq!(map.mass(), 0.0);
    }

    #[test]
    fn centered_instance_has_unit_mass_and_peak_in_its_cell() {
        let scene = scene_with(&[[10.5, 12.5]], 24, 24);
        let map = render_density(&scene, "f00.a0", 1.0).unwrap();
        assert!((map.mass() - 1.0).abs() < 1e-9);
        let (best, _) = map
            .grid
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(best, 10 * 24 + 12);
    }

    #[test]
    fn boundary_instances_keep_their_mass() {
        let centers = [[0.1, 0.1], [0.5, 7.9], [7.9, 0.2], [7.95, 7.95], [0.3, 4.0], [4.0, 0.05], [3.2, 7.7]];
        let scene = scene_with(&centers, 8, 8);
        let map = render_density(&scene, "f00.a0", 1.5).unwrap();
        // summation oracle: every kernel sums to one independently
        let oracle: f64 =
            centers.iter().map(|&c| kernel_weights(c, 1.5, 8, 8).iter().map(|(_, w)| w).sum::<f64>()).sum();
        assert!((oracle - 7.0).abs() < 1e-12);
        assert!((map.mass() - 7.0).abs() < 1e-6);
    }

    #[test]
    fn malformed_category_is_a_lookup_error() {
        let scene = scene_with(&[], 4, 4);
        assert!(matches!(render_density(&scene, "nope", 1.0), Err(SceneError::UnknownCategory(_))));
    }

    #[test]
    fn tiny_sigma_falls_back_to_the_containing_cell() {
        let w = kernel_weights([2.1, 3.1], 0.01, 8, 8);
        assert_eq!(w, vec![(2 * 8 + 3, 1.0)]);
    }
}
