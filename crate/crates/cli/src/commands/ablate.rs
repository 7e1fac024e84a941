//! `ablate`: train and score the six-variant ladder that isolates each
//! architectural ingredient — encoder alone, multi-dilation contexts
//! fused in one parallel sum, cascaded fusion, the residual correction
//! on the cascade, the coarse-to-fine refinement stream, and the
//! corrections on refinement. All rows share one seed, so layers common
//! to two variants start from identical parameters, and all rows are
//! scored single-scale on the test split.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use terraseg_core::blocks::AggregationMode;
use terraseg_core::data::{load_scene, patches_for, DatasetManifest};
use terraseg_core::eval::{erode_boundaries, merge, score};
use terraseg_core::infer::{infer_image, InferConfig};
use terraseg_core::model::{build_model, ModelConfig};
use terraseg_core::train::{train_loop, EpochStats, SgdState};
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

/// The ladder, in cumulative order. Each row names what it adds.
pub fn ladder(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut rows = Vec::new();

    let mut v = base.clone();
    v.use_context = false;
    v.use_refinement = false;
    rows.push(("baseline", v));

    let mut v = base.clone();
    v.use_context = true;
    v.context_mode = AggregationMode::ParallelStack;
    v.context_correction = false;
    v.use_refinement = false;
    rows.push(("contexts_parallel", v));

    let mut v = base.clone();
    v.use_context = true;
    v.context_mode = AggregationMode::Cascaded;
    v.context_correction = false;
    v.use_refinement = false;
    rows.push(("contexts_cascaded", v));

    let mut v = base.clone();
    v.use_context = true;
    v.context_mode = AggregationMode::Cascaded;
    v.context_correction = true;
    v.use_refinement = false;
    rows.push(("contexts_corrected", v));

    let mut v = base.clone();
    v.use_context = true;
    v.context_mode = AggregationMode::Cascaded;
    v.context_correction = true;
    v.use_refinement = true;
    v.refinement_correction = false;
    rows.push(("refined", v));

    let mut v = base.clone();
    v.use_context = true;
    v.context_mode = AggregationMode::Cascaded;
    v.context_correction = true;
    v.use_refinement = true;
    v.refinement_correction = true;
    rows.push(("refined_corrected", v));

    rows
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub overall_accuracy: f64,
    pub final_loss: f64,
}

pub fn run(cfg: &RunConfig, data_dir: &Path, out: &Path, log: &mut RunLog) -> Result<i32> {
    let manifest = DatasetManifest::load(data_dir)?;
    if manifest.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model is configured for {}",
            manifest.classes, cfg.model.classes
        )));
    }
    let stride = cfg.model.stride();
    if cfg.data.patch % stride != 0 {
        return Err(Error::Config(format!(
            "data.patch {} must be a multiple of the model stride {stride}",
            cfg.data.patch
        )));
    }
    prepare_out(out, cfg)?;

    let mut row_train = cfg.train.clone();
    if let Some(epochs) = cfg.ablate.epochs {
        row_train.epochs = epochs;
    }
    if let Some(budget) = cfg.ablate.patches_per_epoch {
        row_train.patches_per_epoch = Some(budget);
    }
    let single_scale = InferConfig { scales: vec![1.0], patch: cfg.infer.patch };

    let patches = patches_for(data_dir, &manifest.train, cfg.data.patch, cfg.data.overlap, true)?;
    log.line(format!(
        "ablate: 6 variants, {} patches, {} epochs x {} patches/epoch, seed {}",
        patches.len(),
        row_train.epochs,
        row_train
            .patches_per_epoch
            .map_or_else(|| "all".to_string(), |n| n.to_string()),
        cfg.seed
    ));

    let mut rows = Vec::new();
    for (variant, model_cfg) in ladder(&cfg.model) {
        let mut model = build_model(&model_cfg, cfg.seed)?;
        let mut state = SgdState::new(&mut model.graph);
        let tl = train_loop(
            &mut model.graph,
            &patches,
            &row_train,
            &mut state,
            0,
            |st: &EpochStats| {
                log.line(format!("row {variant} epoch {} loss {:.6}", st.epoch, st.mean_loss))
            },
        )?;
        let final_loss = tl.epochs.last().map_or(f64::NAN, |st| st.mean_loss);

        let mut reports = Vec::with_capacity(manifest.test.len());
        for entry in &manifest.test {
            let (image, gt) = load_scene(data_dir, entry)?;
            let (_, pred) = infer_image(&mut model, &image, &single_scale)?;
            let mask = if cfg.eval.erosion_radius > 0 {
                Some(erode_boundaries(&gt, cfg.eval.erosion_radius))
            } else {
                None
            };
            reports.push(score(&pred, &gt, mask.as_ref(), manifest.classes)?);
        }
        let merged = merge(&reports)?;
        log.line(format!(
            "row {variant}: mean_iou {:.6} mean_f1 {:.6} overall_accuracy {:.6}",
            merged.mean_iou, merged.mean_f1, merged.overall_accuracy
        ));
        rows.push(AblationRow {
            variant: variant.to_string(),
            mean_iou: merged.mean_iou,
            mean_f1: merged.mean_f1,
            overall_accuracy: merged.overall_accuracy,
            final_loss,
        });
    }

    let json_path = out.join("ablation.json");
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let table_path = out.join("ablation.txt");
    std::fs::write(&table_path, render_table(&rows)).map_err(|e| Error::io(&table_path, e))?;
    log.save(&out.join("run.log"))?;
    Ok(0)
}

fn render_table(rows: &[AblationRow]) -> String {
    let name_w = rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max("variant".len());
    let mut out = String::new();
    writeln!(
        out,
        "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}",
        "variant", "mean_iou", "mean_f1", "accuracy", "loss"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<name_w$}  {:>10.6}  {:>10.6}  {:>10.6}  {:>10.6}",
            r.variant, r.mean_iou, r.mean_f1, r.overall_accuracy, r.final_loss
        )
        .unwrap();
    }
    out
}
