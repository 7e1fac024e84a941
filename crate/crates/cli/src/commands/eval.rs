//! `eval`: score a directory of predictions against a dataset split's
//! ground truth under the boundary-eroded protocol, merging per-scene
//! confusion counts into one report with optional PR curves.

use std::path::Path;

use terraseg_core::data::{load_scene, DatasetManifest};
use terraseg_core::eval::{
    erode_boundaries, merge, pr_csv, pr_curve, render_text, score, uniform_thresholds, EvalReport,
};
use terraseg_core::infer::ProbMap;
use terraseg_core::pnm::read_pgm;
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

use super::{pred_name, probs_name, split_entries};

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub split: &'a str,
    pub pred: &'a Path,
}

pub fn run(cfg: &RunConfig, args: &EvalArgs, out: &Path, log: &mut RunLog) -> Result<i32> {
    let manifest = DatasetManifest::load(args.data)?;
    let entries = split_entries(&manifest, args.split)?;
    prepare_out(out, cfg)?;
    log.line(format!(
        "eval: split {} ({} scenes), erosion radius {}",
        args.split,
        entries.len(),
        cfg.eval.erosion_radius
    ));

    let thresholds = uniform_thresholds(cfg.eval.pr_thresholds);
    let mut reports = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let (_, gt) = load_scene(args.data, entry)?;
        let pred = read_pgm(&args.pred.join(pred_name(i)))?;
        let mask = if cfg.eval.erosion_radius > 0 {
            Some(erode_boundaries(&gt, cfg.eval.erosion_radius))
        } else {
            None
        };
        let mut report = score(&pred, &gt, mask.as_ref(), manifest.classes)?;

        // PR curves when the probability volume is present.
        let probs_path = args.pred.join(probs_name(i));
        if probs_path.exists() {
            let map = ProbMap::load(&probs_path)?;
            for class in 0..manifest.classes {
                report.pr.push(pr_curve(&map.probs, &gt, mask.as_ref(), class, &thresholds)?);
            }
        }
        log.line(format!(
            "{}: iou {:.6} acc {:.6}",
            entry.labels, report.mean_iou, report.overall_accuracy
        ));
        reports.push(report);
    }

    let mut merged = merge(&reports)?;
    merged.class_names = manifest.class_names.clone();
    write_report(out, &merged)?;
    log.line(format!(
        "merged: mean_iou {:.6} mean_f1 {:.6} overall_accuracy {:.6}",
        merged.mean_iou, merged.mean_f1, merged.overall_accuracy
    ));
    log.save(&out.join("run.log"))?;
    Ok(0)
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let json_path = out.join("report.json");
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let text_path = out.join("report.txt");
    std::fs::write(&text_path, render_text(report)).map_err(|e| Error::io(&text_path, e))?;
    let csv_path = out.join("pr.csv");
    std::fs::write(&csv_path, pr_csv(report)).map_err(|e| Error::io(&csv_path, e))
}
