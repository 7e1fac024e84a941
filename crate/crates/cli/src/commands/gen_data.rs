//! `gen-data`: synthesize the dataset — scenes on disk, split manifest,
//! and the patch plan the training split will be cut into.

use std::path::Path;

use serde::{Deserialize, Serialize};

use terraseg_core::data::{generate_dataset, grid_positions};
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

/// How each split turns into patches, written alongside the manifest as
/// provenance. Training commands take the patch grid from their own
/// configuration; this file records what the dataset was generated for.
#[derive(Debug, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch: usize,
    pub overlap: usize,
    pub splits: Vec<SplitPlan>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split: String,
    pub scenes: usize,
    pub augmented: bool,
    pub patches: usize,
}

pub fn run(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<i32> {
    let d = &cfg.data;
    if d.train_scenes == 0 || d.val_scenes == 0 || d.test_scenes == 0 {
        return Err(Error::Config(format!(
            "every split needs at least one scene, got {}/{}/{}",
            d.train_scenes, d.val_scenes, d.test_scenes
        )));
    }
    prepare_out(out, cfg)?;

    log.line(format!(
        "gen-data: {}x{} scenes, splits {}/{}/{}, seed {}",
        d.scene.height, d.scene.width, d.train_scenes, d.val_scenes, d.test_scenes, cfg.seed
    ));
    let manifest = generate_dataset(
        out,
        &d.scene,
        (d.train_scenes, d.val_scenes, d.test_scenes),
        cfg.seed,
    )?;
    log.line(format!(
        "classes: {} ({})",
        manifest.classes,
        manifest.class_names.join(", ")
    ));

    let per_axis_y = grid_positions(d.scene.height, d.patch, d.overlap)?.len();
    let per_axis_x = grid_positions(d.scene.width, d.patch, d.overlap)?.len();
    let crops = per_axis_y * per_axis_x;
    let plan = PatchPlan {
        patch: d.patch,
        overlap: d.overlap,
        splits: vec![
            SplitPlan {
                split: "train".into(),
                scenes: d.train_scenes,
                augmented: true,
                patches: d.train_scenes * crops * 6,
            },
            SplitPlan {
                split: "val".into(),
                scenes: d.val_scenes,
                augmented: false,
                patches: d.val_scenes * crops,
            },
            SplitPlan {
                split: "test".into(),
                scenes: d.test_scenes,
                augmented: false,
                patches: d.test_scenes * crops,
            },
        ],
    };
    let plan_path = out.join("patches.json");
    let json = serde_json::to_string_pretty(&plan)?;
    std::fs::write(&plan_path, json).map_err(|e| Error::io(&plan_path, e))?;

    for s in &plan.splits {
        log.line(format!(
            "{}: {} scenes -> {} patches of {}px (overlap {}{})",
            s.split,
            s.scenes,
            s.patches,
            d.patch,
            d.overlap,
            if s.augmented { ", augmented x6" } else { "" }
        ));
    }
    log.save(&out.join("run.log"))?;
    Ok(0)
}
