mod data;
mod manifest;
mod plot;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use countex_core::gradcheck;
use countex_core::train::{
    self, loss_curve_csv, per_scene_csv, predictions_csv, report_csv, run_irrelevant_negative, run_modality_ablation,
    run_swap_test, Checkpoint, EvalReport, ModalityMask, Model,
};
use countex_core::{Config, ModelError};

use manifest::Outputs;
use settings::{Overrides, Resolved};

#[derive(Parser)]
#[command(name = "countex", version, about = "Counting with positive and negative prompts on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing keys keep their built-in defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Seed, overriding the config [default: config value, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores [default: COUNTEX_THREADS, else config value, else 0]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Scene directory with train/, val/ and test/ subdirectories
    #[arg(long, value_name = "DIR", default_value = "data")]
    data: PathBuf,
    /// Trained checkpoint [default: <out>/checkpoint.json; trains one when absent]
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenes and split them into train/val/test
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of scenes
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train on <data>/train, calibrate the threshold on <data>/val
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory with train/ and val/ subdirectories
        #[arg(long, value_name = "DIR", default_value = "data")]
        data: PathBuf,
    },
    /// Count <data>/test under one prompt modality mask
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Prompt parts supplied, e.g. T_pos+T_neg
        #[arg(long, default_value = "T_pos+E_pos+T_neg+E_neg")]
        mask: String,
    },
    /// Modality ablation and irrelevant-negative rows on <data>/test
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Count each test scene with the prompts in both orders
    Swap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random points per operation
        #[arg(long, default_value_t = gradcheck::POINTS)]
        points: usize,
        /// Added to every analytic gradient; for checking that failures are caught
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
}

/// Failures reported with exit code 3.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.is::<NumericFailure>() || matches!(e.downcast_ref::<ModelError>(), Some(ModelError::NonFinite { .. }))
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn resolve(common: &Common) -> anyhow::Result<Resolved> {
    let overrides = Overrides {
        seed: common.seed,
        threads: common.threads,
        env_threads: std::env::var("COUNTEX_THREADS").ok(),
    };
    let resolved = settings::resolve(common.config.as_deref(), &overrides)?;
    eprint!("{}", resolved.describe());
    Ok(resolved)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate { common, count } => cmd_generate(&common, count),
        Command::Train { common, data } => cmd_train(&common, &data),
        Command::Eval { common, data, mask } => cmd_eval(&common, &data, &mask),
        Command::Ablate { common, data } => cmd_ablate(&common, &data),
        Command::Swap { common, data } => cmd_swap(&common, &data),
        Command::Gradcheck { common, points, perturb } => cmd_gradcheck(&common, points, perturb),
    }
}

fn cmd_generate(common: &Common, count: usize) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let mut out = Outputs::new(&common.out)?;
    let written = data::generate(&r.config, count, out.root())?;
    for rel in &written {
        let bytes = std::fs::read(out.root().join(rel))?;
        out.write(&rel.to_string_lossy(), bytes)?;
    }
    out.write("config.json", r.config.to_json() + "\n")?;
    out.finish("generate", r.path.as_deref(), r.config.seed)?;
    eprintln!("wrote {count} scenes to {}", common.out.display());
    Ok(())
}

/// Trains on `<data>/train` with `<data>/val` for calibration, logging every 100 steps.
fn fit(cfg: &Config, data_dir: &Path) -> anyhow::Result<train::TrainOutcome<f64>> {
    let train_set = data::load(data_dir, "train")?;
    let val_set = data::load(data_dir, "val")?;
    eprintln!("training on {} scenes, calibrating on {}", train_set.len(), val_set.len());
    let outcome = train::train_with::<f64>(cfg, &train_set, &val_set, |step, l| {
        if step % 100 == 0 || step + 1 == cfg.steps {
            eprintln!("step {step:>6}  total {:.4}  cls {:.4}  loc {:.4}  den {:.6}", l.total, l.cls, l.loc, l.den);
        }
    })?;
    eprintln!("calibrated tau = {}", outcome.model.tau);
    Ok(outcome)
}

fn write_training(out: &mut Outputs, outcome: &train::TrainOutcome<f64>) -> anyhow::Result<()> {
    out.write("checkpoint.json", outcome.model.checkpoint().to_json())?;
    out.write("loss_curve.csv", loss_curve_csv(&outcome.curve))?;
    let series = |f: fn(&countex_core::heads::LossBreakdown) -> f64| outcome.curve.iter().map(f).collect::<Vec<_>>();
    let svg = plot::line_chart(
        "training loss",
        "step",
        &[
            ("total", series(|b| b.total)),
            ("L_cls", series(|b| b.cls)),
            ("L_loc", series(|b| b.loc)),
            ("L_den", series(|b| b.den)),
            ("L_share", series(|b| b.share)),
            ("L_div", series(|b| b.div)),
        ],
    );
    out.write("loss_curve.svg", svg)
}

fn cmd_train(common: &Common, data_dir: &Path) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let outcome = fit(&r.config, data_dir)?;
    let mut out = Outputs::new(&common.out)?;
    write_training(&mut out, &outcome)?;
    out.finish("train", r.path.as_deref(), r.config.seed)?;
    Ok(())
}

/// The checkpoint named on the command line, else `<out>/checkpoint.json`,
/// else a model trained now (its files land in `out`).
fn obtain_model(r: &Resolved, args: &DataArgs, out: &mut Outputs) -> anyhow::Result<Model<f64>> {
    let default = out.root().join("checkpoint.json");
    let path = args.checkpoint.clone().or_else(|| default.exists().then_some(default));
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read checkpoint {}", p.display()))?;
            let ck = Checkpoint::from_json(&text).with_context(|| format!("in checkpoint {}", p.display()))?;
            eprintln!("loaded checkpoint {} (seed {}, tau {})", p.display(), ck.config.seed, ck.tau);
            let mut model = Model::from_checkpoint(&ck)?;
            model.config.threads = r.config.threads;
            Ok(model)
        }
        None => {
            let outcome = fit(&r.config, &args.data)?;
            write_training(out, &outcome)?;
            Ok(outcome.model)
        }
    }
}

fn pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("modality_mask,MAE,RMSE,NAE,tau,seed\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.mask, r.mae, r.rmse, r.nae, r.tau, r.seed));
    }
    out
}

fn mae_bars(reports: &[EvalReport]) -> Vec<(String, f64)> {
    reports.iter().map(|r| (r.mask.clone(), r.mae)).collect()
}

fn test_scenes(data_dir: &Path) -> anyhow::Result<Vec<countex_core::scene::Scene>> {
    let scenes = data::load(data_dir, "test")?;
    if scenes.is_empty() {
        anyhow::bail!("no test scenes under {}", data_dir.join("test").display());
    }
    Ok(scenes)
}

fn cmd_eval(common: &Common, args: &DataArgs, mask: &str) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let mask = ModalityMask::from_label(mask)?;
    let mut out = Outputs::new(&common.out)?;
    let model = obtain_model(&r, args, &mut out)?;
    let scenes = test_scenes(&args.data)?;
    let (report, predictions) = pool(model.config.threads)?.install(|| -> anyhow::Result<_> {
        let report = train::evaluate(&model, &scenes, mask)?;
        let predictions = scenes
            .iter()
            .map(|s| {
                let prompts = train::build_prompts(s, &s.positive_category, &s.negative_category, mask);
                Ok((s.scene_id.clone(), model.predict(s, &prompts)?))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok((report, predictions))
    })?;
    eprintln!("{}: MAE {:.4}  RMSE {:.4}  NAE {:.4}", report.mask, report.mae, report.rmse, report.nae);
    if report.nae_excluded > 0 {
        eprintln!("warning: {} scenes with zero ground truth left out of NAE", report.nae_excluded);
    }
    out.write("report.csv", report_csv(std::slice::from_ref(&report)))?;
    out.write("per_scene.csv", per_scene_csv(&report))?;
    out.write("predictions.csv", predictions_csv(&predictions))?;
    let bars = vec![("MAE".to_string(), report.mae), ("RMSE".to_string(), report.rmse), ("NAE".to_string(), report.nae)];
    out.write("report.svg", plot::bar_chart(&format!("test metrics, {}", report.mask), "value", &bars))?;
    out.finish("eval", r.path.as_deref(), model.config.seed)?;
    Ok(())
}

fn cmd_ablate(common: &Common, args: &DataArgs) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let mut out = Outputs::new(&common.out)?;
    let model = obtain_model(&r, args, &mut out)?;
    let scenes = test_scenes(&args.data)?;
    let (ablation, irrelevant) = pool(model.config.threads)?.install(|| -> anyhow::Result<_> {
        Ok((run_modality_ablation(&model, &scenes)?, run_irrelevant_negative(&model, &scenes)?))
    })?;
    for rep in ablation.iter().chain(&irrelevant[1..2]) {
        eprintln!("{:<28} MAE {:.4}  RMSE {:.4}", rep.mask, rep.mae, rep.rmse);
    }
    out.write("ablation.csv", summary_csv(&ablation))?;
    out.write("ablation_report.csv", report_csv(&ablation))?;
    out.write("ablation.svg", plot::bar_chart("MAE by prompt modality", "MAE", &mae_bars(&ablation)))?;
    out.write("irrelevant.csv", summary_csv(&irrelevant))?;
    out.write("irrelevant.svg", plot::bar_chart("MAE by negative prompt", "MAE", &mae_bars(&irrelevant)))?;
    out.finish("ablate", r.path.as_deref(), model.config.seed)?;
    Ok(())
}

fn cmd_swap(common: &Common, args: &DataArgs) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let mut out = Outputs::new(&common.out)?;
    let model = obtain_model(&r, args, &mut out)?;
    let scenes = test_scenes(&args.data)?;
    let report = pool(model.config.threads)?.install(|| run_swap_test(&model, &scenes))?;
    eprintln!(
        "closer to the prompted count under both orders: {}/{} ({:.1}%)",
        report.closer,
        report.considered,
        100.0 * report.closer_fraction()
    );
    let mut rows = String::from("scene_id,gt_positive,gt_negative,pred_positive_prompt,pred_negative_prompt\n");
    for (a, b) in report.original.records.iter().zip(&report.swapped.records) {
        rows.push_str(&format!("{},{},{},{},{}\n", a.scene_id, a.gt, b.gt, a.pred, b.pred));
    }
    out.write("swap.csv", report_csv(&[report.original.clone(), report.swapped.clone()]))?;
    out.write("swap_scenes.csv", rows)?;
    out.write(
        "swap_summary.csv",
        format!("closer,considered,fraction\n{},{},{}\n", report.closer, report.considered, report.closer_fraction()),
    )?;
    let bars = vec![
        ("positive prompt".to_string(), report.original.mae),
        ("swapped prompts".to_string(), report.swapped.mae),
    ];
    out.write("swap.svg", plot::bar_chart("MAE under prompt swap", "MAE", &bars))?;
    out.finish("swap", r.path.as_deref(), model.config.seed)?;
    Ok(())
}

fn cmd_gradcheck(common: &Common, points: usize, perturb: f64) -> anyhow::Result<()> {
    let r = resolve(common)?;
    let seed = r.config.seed;
    let mut out = Outputs::new(&common.out)?;
    let mut csv = String::from("operation,points,max_rel_error,input,index,analytic,numeric,passed\n");
    let mut failed = Vec::new();
    println!("{:<22} {:>12}  {}", "operation", "max rel err", "result");
    for case in gradcheck::cases() {
        let rep = gradcheck::run_case(&case, seed, points, perturb)?;
        let verdict = if rep.passed() { "PASS" } else { "FAIL" };
        println!("{:<22} {:>12.3e}  {verdict}", rep.name, rep.worst_rel);
        if !rep.passed() {
            println!(
                "    worst at input {} index {}: analytic {:e} vs numeric {:e}",
                rep.worst_input, rep.worst_index, rep.analytic, rep.numeric
            );
            failed.push(rep.name.clone());
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            rep.name,
            rep.points,
            rep.worst_rel,
            rep.worst_input,
            rep.worst_index,
            rep.analytic,
            rep.numeric,
            rep.passed()
        ));
    }
    out.write("gradcheck.csv", csv)?;
    out.finish("gradcheck", r.path.as_deref(), seed)?;
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
