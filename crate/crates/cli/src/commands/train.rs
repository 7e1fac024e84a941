//! `train`: fit the model on the training split, checkpointing at the
//! configured interval and always at the end. `--resume` restarts from a
//! checkpoint and reproduces the uninterrupted run exactly: shuffles and
//! dropout are keyed by epoch and step, and the optimizer's velocity
//! buffers travel with the checkpoint.

use std::fmt::Write as _;
use std::path::Path;

use terraseg_core::data::{patches_for, DatasetManifest};
use terraseg_core::model::{build_model, load_checkpoint, save_checkpoint};
use terraseg_core::train::{learning_rate, train_loop, EpochStats, SgdState};
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

pub fn run(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: &mut RunLog,
) -> Result<i32> {
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

    let patches = patches_for(data_dir, &manifest.train, cfg.data.patch, cfg.data.overlap, true)?;
    log.line(format!(
        "train: {} scenes -> {} augmented patches of {}px, seed {}",
        manifest.train.len(),
        patches.len(),
        cfg.data.patch,
        cfg.seed
    ));

    let (mut model, mut state, start_epoch, mut history) = match resume {
        None => {
            let mut model = build_model(&cfg.model, cfg.seed)?;
            let state = SgdState::new(&mut model.graph);
            (model, state, 0usize, Vec::new())
        }
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.model.config != cfg.model {
                return Err(Error::Config(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
            if ck.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, cannot resume with seed {}",
                    ck.seed, cfg.seed
                )));
            }
            let mut model = ck.model;
            let state = match ck.optimizer {
                Some(s) => s,
                None => SgdState::new(&mut model.graph),
            };
            log.line(format!("resuming from epoch {}", ck.epoch));
            (model, state, ck.epoch, ck.loss_history)
        }
    };

    let total = cfg.train.epochs;
    let mut epoch = start_epoch;
    let mut stopped = false;
    while epoch < total && !stopped {
        let target = (((epoch / cfg.save_every) + 1) * cfg.save_every).min(total);
        let mut chunk = cfg.train.clone();
        chunk.epochs = target;
        let tl = train_loop(
            &mut model.graph,
            &patches,
            &chunk,
            &mut state,
            epoch,
            |st: &EpochStats| log.line(epoch_line(st)),
        )?;
        history.extend(tl.epochs.iter().map(|st| st.mean_loss));
        epoch = tl.epochs.last().map_or(target, |st| st.epoch + 1);
        stopped = tl.stopped_early;
        if stopped {
            log.line(format!("early stop: accuracy target reached at epoch {}", epoch - 1));
        }
        if epoch < total && !stopped {
            let name = format!("ckpt_epoch_{epoch:04}");
            save_checkpoint(&out.join(&name), &model, epoch, &history, cfg.seed, Some(&state))?;
            log.line(format!("checkpoint written: {name}"));
        }
    }

    save_checkpoint(&out.join("checkpoint"), &model, epoch, &history, cfg.seed, Some(&state))?;
    write_loss_csv(&out.join("loss.csv"), cfg, &history)?;
    log.line(format!(
        "training complete: epoch {epoch}, final loss {:.6}",
        history.last().copied().unwrap_or(f64::NAN)
    ));
    log.save(&out.join("run.log"))?;
    Ok(0)
}

fn epoch_line(st: &EpochStats) -> String {
    let mut line = format!("epoch {} loss {:.6} lr {:.6}", st.epoch, st.mean_loss, st.lr);
    if let Some(acc) = st.accuracy {
        write!(line, " acc {acc:.6}").unwrap();
    }
    line
}

/// Full-precision loss log; `{}` prints the shortest decimal that
/// round-trips the f64.
fn write_loss_csv(path: &Path, cfg: &RunConfig, history: &[f64]) -> Result<()> {
    let mut csv = String::from("epoch,loss,lr\n");
    for (epoch, loss) in history.iter().enumerate() {
        let lr = learning_rate(&cfg.train, epoch);
        writeln!(csv, "{epoch},{loss},{lr}").unwrap();
    }
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

