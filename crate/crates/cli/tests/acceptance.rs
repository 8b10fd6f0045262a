//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use countex_core::config::ProjectionMode;
use countex_core::dqr::{diversity_loss, dqr_forward, extract_exclusive, identify_shared, select_smallest, DqrParams, DqrShape};
use countex_core::gradcheck;
use countex_core::heads::{count, matching::assign};
use countex_core::scene::{generate_scene, render_density, Scene};
use countex_core::tensor::{Graph, Matrix, ParamStore, RngStream};
use countex_core::train::{build_prompts, run_irrelevant_negative, run_swap_test, train, ModalityMask};
use countex_core::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_config(name: &str) -> Config {
    let path = workspace_root().join("configs").join(name);
    Config::from_json(&std::fs::read_to_string(&path).expect("bundled config")).expect("valid bundled config")
}

fn scenes(cfg: &Config, tag: &str, n: usize) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            generate_scene(cfg, &RngStream::new(cfg.world_seed, tag).child(i.to_string()), &format!("{tag}-{i}")).unwrap()
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::run_suite(0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.worst_rel).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty() && elapsed < Duration::from_secs(60) && reports.iter().all(|r| r.points == gradcheck::POINTS),
        format!("{} operations, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s", reports.len(), elapsed.as_secs_f64()),
    )
}

fn dqr_shape(dim: usize, r: usize, m: usize) -> DqrShape {
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

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut problems = Vec::new();

    // L_div is zero exactly when the rows are orthonormal
    for trial in 0..50 {
        let r = rng.random_range(1..5);
        let d = r + rng.random_range(0..4);
        let mut g = Graph::<f64>::new();
        let c = g.leaf(random(&mut rng, r, d));
        let (basis, _) = countex_core::dqr::gram_schmidt(&mut g, c, None).unwrap();
        let l = diversity_loss(&mut g, basis).unwrap();
        if g.scalar_value(l).abs() > 1e-8 {
            problems.push(format!("L_div {} on orthonormal rows (trial {trial})", g.scalar_value(l)));
        }
        let raw = diversity_loss(&mut g, c).unwrap();
        if g.scalar_value(raw) <= 1e-8 {
            problems.push(format!("L_div zero on random rows (trial {trial})"));
        }
    }

    // residual orthogonality, idempotent projection, gate-off identity
    for trial in 0..50 {
        let mut store = ParamStore::<f64>::new();
        let shape = dqr_shape(8, rng.random_range(1..5), rng.random_range(1..5));
        let params = DqrParams::new(&mut store, &RngStream::new(trial, "inv"), shape).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let qp = g.leaf(random(&mut rng, 6, 8));
        let qn = g.leaf(random(&mut rng, 6, 8));
        let bank = identify_shared(&mut g, &bind, &params, qp, qn, None).unwrap();
        let (_, res) = extract_exclusive(&mut g, qn, &bank, shape.exclusive, ProjectionMode::Orthonormal, None).unwrap();
        let basis = g.value(bank.basis).clone();
        let rv = g.value(res).clone();
        let dots = rv.matmul_t(&basis).unwrap();
        let worst = dots.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if worst >= 1e-6 {
            problems.push(format!("residual not orthogonal to basis: {worst:e}"));
        }
        let again = rv.zip_map(&dots.matmul(&basis).unwrap(), |a, b| a - b).unwrap();
        if again.max_abs_diff(&rv) >= 1e-10 {
            problems.push("projection not idempotent".into());
        }
        let out = dqr_forward(&mut g, &bind, &params, qp, Some(qn), None, None).unwrap();
        let ln = params.out_norm.forward(&mut g, &bind, qp).unwrap();
        if g.value(out.refined) != g.value(ln) {
            problems.push("gate-off output differs from LN(Qpos)".into());
        }
    }

    // density mass equals count
    let cfg = Config { grid_rows: 12, grid_cols: 12, count_min: 1, count_max: 30, ..Config::default() };
    for s in scenes(&cfg, "mass", 50) {
        for cat in [&s.positive_category, &s.negative_category] {
            let mass = render_density(&s, cat, cfg.kernel_sigma).unwrap().mass();
            if (mass - s.count(cat) as f64).abs() > 1e-6 {
                problems.push(format!("density mass {mass} vs count {}", s.count(cat)));
            }
        }
    }

    // count is monotone in tau
    for _ in 0..200 {
        let scores: Vec<f64> = (0..rng.random_range(0..40)).map(|_| rng.random::<f64>()).collect();
        let mut a: f64 = rng.random();
        let mut b: f64 = rng.random();
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if count(&scores, b) > count(&scores, a) {
            problems.push("count grew with tau".into());
        }
    }

    // softmax rows sum to one and are positive; layer-norm rows have zero mean, unit variance
    for _ in 0..50 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(2..9);
        let x = random(&mut rng, rows, cols).scale(5.0);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x);
        let s = g.softmax_rows(v);
        for r in 0..rows {
            let row = g.value(s).row(r);
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 || row.iter().any(|&p| p <= 0.0) {
                problems.push("softmax row property".into());
            }
        }
        let gain = g.leaf(Matrix::filled(1, cols, 1.0));
        let shift = g.leaf(Matrix::zeros(1, cols));
        let ln = g.layer_norm(v, gain, shift, 1e-12).unwrap();
        for r in 0..rows {
            let row = g.value(ln).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            if mean.abs() > 1e-10 || (var - 1.0).abs() > 1e-6 {
                problems.push(format!("layer-norm row mean {mean:e} var {var}"));
            }
        }
    }

    let n = problems.len();
    problems.truncate(3);
    Outcome::new(n == 0, format!("{n} violations {problems:?}"))
}

fn brute_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    // enumerate injective maps from the smaller side into the larger
    fn go(k: usize, small: usize, large: usize, used: &mut Vec<bool>, c: &dyn Fn(usize, usize) -> f64, acc: f64) -> f64 {
        if k == small {
            return acc;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(go(k + 1, small, large, used, c, acc + c(k, j)));
                used[j] = false;
            }
        }
        best
    }
    if rows <= cols {
        go(0, rows, cols, &mut vec![false; cols], &|i, j| cost[i * cols + j], 0.0)
    } else {
        go(0, cols, rows, &mut vec![false; rows], &|j, i| cost[i * cols + j], 0.0)
    }
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = [0usize; 3];
    for _ in 0..1000 {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=6);
        // integer costs make ties common
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..5) as f64).collect();
        let a = assign(&cost, rows, cols);
        let mut seen = vec![false; cols];
        let mut total = 0.0;
        let mut valid = a.iter().flatten().count() == rows.min(cols);
        for (i, j) in a.iter().enumerate() {
            if let Some(j) = *j {
                valid &= !seen[j];
                seen[j] = true;
                total += cost[i * cols + j];
            }
        }
        if !valid || (total - brute_min_cost(&cost, rows, cols)).abs() > 1e-9 {
            mismatches[0] += 1;
        }
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.25 - 0.5).collect();
        let expected: Vec<usize> = (0..n)
            .filter(|&i| (0..n).filter(|&j| scores[j] < scores[i] || (scores[j] == scores[i] && j < i)).count() < m)
            .collect();
        if select_smallest(&scores, m).unwrap() != expected {
            mismatches[1] += 1;
        }
    }
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        let tau = rng.random_range(0..10) as f64 / 10.0;
        let mut brute = 0;
        for &s in &scores {
            if s > tau {
                brute += 1;
            }
        }
        if count(&scores, tau) != brute {
            mismatches[2] += 1;
        }
    }
    Outcome::new(
        mismatches == [0, 0, 0],
        format!("mismatches: matching {}, selection {}, count {}", mismatches[0], mismatches[1], mismatches[2]),
    )
}

struct SeedResult {
    pos: f64,
    irrelevant: f64,
    relevant: f64,
    swap: f64,
    role_a: f64,
    role_b: f64,
}

/// Five training seeds at smoke scale, each evaluated on the same 200 test scenes.
fn sweep() -> (Vec<SeedResult>, Duration) {
    let base = load_config("smoke.json");
    let start = Instant::now();
    let train_set = scenes(&base, "train", 3000);
    let val_set = scenes(&base, "val", 100);
    let test_set = scenes(&base, "test", 200);
    let mut out = Vec::new();
    for seed in 0..5 {
        let cfg = Config { seed, ..base.clone() };
        let model = train::<f64>(&cfg, &train_set, &val_set).expect("training").model;
        let rows = run_irrelevant_negative(&model, &test_set).expect("irrelevant rows");
        let swap = run_swap_test(&model, &test_set).expect("swap test");
        println!(
            "  seed {seed}: T_pos {:.3}  irrelevant {:.3}  relevant {:.3}  swap {:.3}  tau {}",
            rows[0].mae,
            rows[1].mae,
            rows[2].mae,
            swap.closer_fraction(),
            model.tau
        );
        out.push(SeedResult {
            pos: rows[0].mae,
            irrelevant: rows[1].mae,
            relevant: rows[2].mae,
            swap: swap.closer_fraction(),
            role_a: swap.original.mae,
            role_b: swap.swapped.mae,
        });
    }
    (out, start.elapsed())
}

fn ablation_trend(results: &[SeedResult], elapsed: Duration) -> Outcome {
    let pos = median(results.iter().map(|r| r.pos).collect());
    let rel = median(results.iter().map(|r| r.relevant).collect());
    let gain = 1.0 - rel / pos;
    Outcome::new(
        gain >= 0.10 && elapsed <= Duration::from_secs(600),
        format!(
            "median MAE T_pos {pos:.3}, T_pos+T_neg {rel:.3}, reduction {:.1}% (need >= 10%), sweep {:.0}s",
            100.0 * gain,
            elapsed.as_secs_f64()
        ),
    )
}

fn irrelevant_ordering(results: &[SeedResult]) -> Outcome {
    let pos = median(results.iter().map(|r| r.pos).collect());
    let irr = median(results.iter().map(|r| r.irrelevant).collect());
    let rel = median(results.iter().map(|r| r.relevant).collect());
    Outcome::new(pos > irr && irr > rel, format!("median MAE T_pos {pos:.3} > irrelevant {irr:.3} > relevant {rel:.3}"))
}

fn swap(results: &[SeedResult]) -> Outcome {
    let frac = median(results.iter().map(|r| r.swap).collect());
    let a = median(results.iter().map(|r| r.role_a).collect());
    let b = median(results.iter().map(|r| r.role_b).collect());
    Outcome::new(
        frac >= 0.90,
        format!("median fraction closer under both orders {:.1}% (need >= 90%); role-A MAE {a:.3}, role-B MAE {b:.3}", 100.0 * frac),
    )
}

/// Nearest-centroid labels with per-category centroids measured on training scenes.
struct CentroidOracle {
    centroids: Vec<(String, Vec<f64>)>,
}

impl CentroidOracle {
    fn fit(train: &[Scene]) -> Self {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for inst in train.iter().flat_map(|s| &s.instances) {
            let e = sums.entry(inst.category.clone()).or_insert_with(|| (vec![0.0; inst.features.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&inst.features) {
                *a += b;
            }
            e.1 += 1;
        }
        let centroids = sums.into_iter().map(|(k, (v, n))| (k, v.iter().map(|x| x / n as f64).collect())).collect();
        Self { centroids }
    }

    fn label(&self, features: &[f64]) -> &str {
        let dist = |c: &[f64]| c.iter().zip(features).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let best = self.centroids.iter().min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1))).expect("centroids");
        &best.0
    }

    fn count(&self, scene: &Scene) -> usize {
        scene.instances.iter().filter(|i| self.label(&i.features) == scene.positive_category).count()
    }
}

fn tiny_scenes() -> Outcome {
    let cfg = load_config("tiny.json");
    assert!(cfg.attribute_separation >= 0.8 && 2 * cfg.count_max + cfg.distractor_max <= 10);
    let train_set = scenes(&cfg, "train", 2000);
    let val_set = scenes(&cfg, "val", 100);
    let test_set = scenes(&cfg, "test", 200);
    let oracle = CentroidOracle::fit(&train_set);
    let model = train::<f64>(&cfg, &train_set, &val_set).expect("training").model;
    let agree = test_set
        .iter()
        .filter(|s| {
            let prompts = build_prompts(s, &s.positive_category, &s.negative_category, ModalityMask::ALL);
            model.count(s, &prompts).unwrap() == oracle.count(s)
        })
        .count();
    Outcome::new(agree * 100 >= 95 * test_set.len(), format!("model count equals oracle count on {agree}/{} scenes", test_set.len()))
}

fn countex(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_countex"))
        .args(args)
        .env_remove("COUNTEX_THREADS")
        .stderr(std::process::Stdio::null())
        .status()
        .expect("run countex");
    assert!(status.success(), "countex {args:?} failed: {status}");
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let tiny = Config { steps: 150, ..load_config("tiny.json") };
    std::fs::write(&config, tiny.to_json()).unwrap();
    let cfg = config.to_str().unwrap();
    let data = dir.path().join("data");
    countex(&["generate", "--config", cfg, "--count", "60", "--out", data.to_str().unwrap()]);
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
        countex(&["train", "--config", cfg, "--data", d, "--out", o]);
        countex(&["eval", "--config", cfg, "--data", d, "--out", o]);
        runs.push(out);
    }
    let files = ["loss_curve.csv", "report.csv", "per_scene.csv", "predictions.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).unwrap())
        .collect();
    Outcome::new(differing.is_empty(), format!("{} CSV files compared, differing: {differing:?}", files.len()))
}

#[test]
fn acceptance() {
    let mut outcomes: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} ({name}): {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, name, o));
    };
    record(1, "gradient suite", gradient_suite());
    record(2, "algebraic invariants", invariants());
    record(3, "brute-force oracles", oracles());
    let (results, elapsed) = sweep();
    record(4, "ablation trend", ablation_trend(&results, elapsed));
    record(5, "irrelevant-negative ordering", irrelevant_ordering(&results));
    record(6, "swap test", swap(&results));
    record(7, "tiny-scene oracle", tiny_scenes());
    record(8, "determinism", determinism());

    println!();
    for (n, name, o) in &outcomes {
        println!("{}  {n}. {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<u32> = outcomes.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
