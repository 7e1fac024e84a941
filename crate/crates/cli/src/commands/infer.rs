//! `infer`: whole-image prediction from a checkpoint — either one PPM
//! image or every scene of a dataset split. Each prediction is written
//! as a PGM label map plus the averaged probability volume with its
//! JSON sidecar.

use std::path::Path;

use terraseg_core::data::{load_scene, DatasetManifest};
use terraseg_core::infer::infer_image;
use terraseg_core::model::load_checkpoint;
use terraseg_core::pnm::{read_ppm, write_pgm};
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

use super::{pred_name, probs_name, probs_sidecar_name, split_entries};

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub split: &'a str,
}

pub fn run(cfg: &RunConfig, args: &InferArgs, out: &Path, log: &mut RunLog) -> Result<i32> {
    let ck = load_checkpoint(args.checkpoint)?;
    let mut model = ck.model;
    prepare_out(out, cfg)?;
    log.line(format!(
        "infer: checkpoint at epoch {}, scales {:?}, patch {}",
        ck.epoch, cfg.infer.scales, cfg.infer.patch
    ));

    match (args.image, args.data) {
        (Some(image_path), _) => {
            let image = read_ppm(image_path)?;
            let (map, labels) = infer_image(&mut model, &image, &cfg.infer)?;
            write_pgm(&out.join("pred.pgm"), &labels)?;
            let names = fallback_names(model.config.classes);
            map.save(&out.join("probs.tsr"), &out.join("probs.json"), &names)?;
            log.line(format!(
                "{} -> pred.pgm ({}x{})",
                image_path.display(),
                labels.height(),
                labels.width()
            ));
        }
        (None, Some(data_dir)) => {
            let manifest = DatasetManifest::load(data_dir)?;
            if manifest.classes != model.config.classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the checkpoint model has {}",
                    manifest.classes,
                    model.config.classes
                )));
            }
            let entries = split_entries(&manifest, args.split)?;
            for (i, entry) in entries.iter().enumerate() {
                let (image, _) = load_scene(data_dir, entry)?;
                let (map, labels) = infer_image(&mut model, &image, &cfg.infer)?;
                write_pgm(&out.join(pred_name(i)), &labels)?;
                map.save(
                    &out.join(probs_name(i)),
                    &out.join(probs_sidecar_name(i)),
                    &manifest.class_names,
                )?;
                log.line(format!("{} -> {}", entry.image, pred_name(i)));
            }
            log.line(format!("{} scenes predicted from split {}", entries.len(), args.split));
        }
        (None, None) => {
            return Err(Error::Config("infer needs --image or --data".into()));
        }
    }
    log.save(&out.join("run.log"))?;
    Ok(0)
}

/// Class names when no manifest is around: the generator vocabulary as
/// far as it reaches, generic labels beyond.
fn fallback_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| {
            terraseg_core::data::CLASS_NAMES
                .get(k)
                .map_or_else(|| format!("class_{k}"), |n| n.to_string())
        })
        .collect()
}
