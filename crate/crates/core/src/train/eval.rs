use std::fmt::Write as _;

use rayon::prelude::*;

use crate::encoder::PromptSpec;
use crate::error::ModelError;
use crate::heads::{LossBreakdown, PredictionSet};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::train::model::{build_prompts, ModalityMask, Model};

/// Candidate thresholds for calibration.
pub const TAU_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub gt: usize,
    pub pred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    /// Scenes left out of NAE because their ground truth is zero.
    pub nae_excluded: usize,
    pub records: Vec<SceneRecord>,
    pub tau: f64,
    pub mask: String,
    pub seed: u64,
}

/// `(MAE, RMSE, NAE, scenes excluded from NAE)`.
pub fn metrics(records: &[SceneRecord]) -> (f64, f64, f64, usize) {
    if records.is_empty() {
        return (0.0, 0.0, 0.0, 0);
    }
    let n = records.len() as f64;
    let err = |r: &SceneRecord| r.pred as f64 - r.gt as f64;
    let mae = records.iter().map(|r| err(r).abs()).sum::<f64>() / n;
    let rmse = (records.iter().map(|r| err(r).powi(2)).sum::<f64>() / n).sqrt();
    let usable: Vec<&SceneRecord> = records.iter().filter(|r| r.gt > 0).collect();
    let nae = if usable.is_empty() {
        0.0
    } else {
        usable.iter().map(|r| err(r).abs() / r.gt as f64).sum::<f64>() / usable.len() as f64
    };
    (mae, rmse, nae, records.len() - usable.len())
}

impl EvalReport {
    pub fn from_records(records: Vec<SceneRecord>, tau: f64, mask: impl Into<String>, seed: u64) -> Self {
        let (mae, rmse, nae, nae_excluded) = metrics(&records);
        Self { mae, rmse, nae, nae_excluded, records, tau, mask: mask.into(), seed }
    }
}

/// Counts every scene under the prompts returned by `setup`, which also
/// supplies the ground truth.
pub fn evaluate_with<T: Scalar>(
    model: &Model<T>,
    scenes: &[Scene],
    label: &str,
    setup: impl Fn(&Scene) -> Result<(PromptSpec, usize), ModelError> + Sync,
) -> Result<EvalReport, ModelError> {
    let records: Vec<Result<SceneRecord, ModelError>> = scenes
        .par_iter()
        .map(|s| {
            let (prompts, gt) = setup(s)?;
            let pred = model.count(s, &prompts)?;
            Ok(SceneRecord { scene_id: s.scene_id.clone(), gt, pred })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_records(records, model.tau, label, model.config.seed))
}

/// Counts each scene's positive category under `mask`.
pub fn evaluate<T: Scalar>(model: &Model<T>, scenes: &[Scene], mask: ModalityMask) -> Result<EvalReport, ModelError> {
    evaluate_with(model, scenes, &mask.label(), |s| {
        Ok((build_prompts(s, &s.positive_category, &s.negative_category, mask), s.positive_count()))
    })
}

/// One report per ablation mask, all at the model's calibrated threshold.
pub fn run_modality_ablation<T: Scalar>(model: &Model<T>, scenes: &[Scene]) -> Result<Vec<EvalReport>, ModelError> {
    ModalityMask::ABLATION.iter().map(|&m| evaluate(model, scenes, m)).collect()
}

/// Positive-only, irrelevant-negative and relevant-negative rows.
pub fn run_irrelevant_negative<T: Scalar>(model: &Model<T>, scenes: &[Scene]) -> Result<Vec<EvalReport>, ModelError> {
    let attributes = model.config.attributes;
    let irrelevant = evaluate_with(model, scenes, "T_pos+T_neg_irrelevant", |s| {
        let other = s.irrelevant_category(attributes)?;
        Ok((build_prompts(s, &s.positive_category, &other, ModalityMask::POS_NEG_TEXT), s.positive_count()))
    })?;
    Ok(vec![
        evaluate(model, scenes, ModalityMask::POS_ONLY)?,
        irrelevant,
        evaluate(model, scenes, ModalityMask::POS_NEG_TEXT)?,
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapReport {
    /// Counting the positive category, excluding the negative one.
    pub original: EvalReport,
    /// Same scenes with the two prompts exchanged.
    pub swapped: EvalReport,
    /// Scenes whose estimate is closer to the prompted ground truth under both orderings.
    pub closer: usize,
    /// Scenes where the two ground truths differ (the comparison is undefined otherwise).
    pub considered: usize,
}

impl SwapReport {
    pub fn closer_fraction(&self) -> f64 {
        if self.considered == 0 {
            return 0.0;
        }
        self.closer as f64 / self.considered as f64
    }
}

pub fn run_swap_test<T: Scalar>(model: &Model<T>, scenes: &[Scene]) -> Result<SwapReport, ModelError> {
    let mask = ModalityMask::POS_NEG_TEXT;
    let original = evaluate(model, scenes, mask)?;
    let swapped_scenes: Vec<Scene> = scenes.iter().map(Scene::swapped).collect();
    let mut swapped = evaluate(model, &swapped_scenes, mask)?;
    swapped.mask = format!("{}|swapped", mask.label());
    let mut closer = 0;
    let mut considered = 0;
    for (a, b) in original.records.iter().zip(&swapped.records) {
        // a.gt is the positive count, b.gt the negative count
        if a.gt == b.gt {
            continue;
        }
        considered += 1;
        let dist = |pred: usize, gt: usize| (pred as i64 - gt as i64).abs();
        if dist(a.pred, a.gt) < dist(a.pred, b.gt) && dist(b.pred, b.gt) < dist(b.pred, a.gt) {
            closer += 1;
        }
    }
    Ok(SwapReport { original, swapped, closer, considered })
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric,value,modality_mask,tau,seed\n");
    for r in reports {
        for (name, v) in [("MAE", r.mae), ("RMSE", r.rmse), ("NAE", r.nae)] {
            let _ = writeln!(out, "{name},{v},{},{},{}", r.mask, r.tau, r.seed);
        }
    }
    out
}

/// Parses [`report_csv`] output back into metric-only reports.
pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>, ModelError> {
    let bad = |line: usize, msg: &str| ModelError::Contract(format!("report csv line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "metric,value,modality_mask,tau,seed")) => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut out: Vec<EvalReport> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let value = num(f[1])?;
        let tau = num(f[3])?;
        let seed = f[4].parse::<u64>().map_err(|_| bad(i + 1, "bad seed"))?;
        let fresh = out.last().is_none_or(|r: &EvalReport| r.mask != f[2] || f[0] == "MAE");
        if fresh {
            out.push(EvalReport {
                mae: 0.0,
                rmse: 0.0,
                nae: 0.0,
                nae_excluded: 0,
                records: Vec::new(),
                tau,
                mask: f[2].to_string(),
                seed,
            });
        }
        let r = out.last_mut().expect("pushed above");
        match f[0] {
            "MAE" => r.mae = value,
            "RMSE" => r.rmse = value,
            "NAE" => r.nae = value,
            _ => return Err(bad(i + 1, "unknown metric")),
        }
    }
    Ok(out)
}

pub fn per_scene_csv(report: &EvalReport) -> String {
    let mut out = String::from("scene_id,gt,pred\n");
    for r in &report.records {
        let _ = writeln!(out, "{},{},{}", r.scene_id, r.gt, r.pred);
    }
    out
}

pub fn predictions_csv(rows: &[(String, PredictionSet)]) -> String {
    let mut out = String::from("scene_id,query_index,row,col,score\n");
    for (id, p) in rows {
        for (q, (c, s)) in p.centers.iter().zip(&p.scores).enumerate() {
            let _ = writeln!(out, "{id},{q},{},{},{s}", c[0], c[1]);
        }
    }
    out
}

pub fn loss_curve_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from("step,L_cls,L_loc,L_den,L_share,L_div,total\n");
    for (step, b) in curve.iter().enumerate() {
        let _ = writeln!(out, "{step},{},{},{},{},{},{}", b.cls, b.loc, b.den, b.share, b.div, b.total);
    }
    out
}
