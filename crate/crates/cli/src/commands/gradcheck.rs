//! `gradcheck`: finite-difference verification of every layer's backward
//! pass plus the assembled network, with an optional injected sign fault
//! that the check must catch (a mutation control for the harness itself).

use std::path::Path;

use serde::Serialize;

use terraseg_core::gradcheck::{check_model, layer_suite, CaseReport, Fault, GradReport};
use terraseg_core::model::{build_model, ModelConfig};
use terraseg_core::rng::{self, tag};
use terraseg_core::tensor::{LabelMap, Tensor};
use terraseg_core::{Error, Result};

use crate::config::{prepare_out, RunConfig};
use crate::runlog::RunLog;

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const MODEL_SAMPLES: usize = 240;

#[derive(Debug, Serialize)]
struct GradcheckArtifact {
    fault_injected: bool,
    layers: GradReport,
    model: CaseReport,
    passed: bool,
}

/// Deterministic probe input for the assembled-network check: a small
/// random batch and labels drawn from the run seed.
pub fn probe_batch(seed: u64, in_channels: usize, classes: usize, side: usize) -> (Tensor, LabelMap) {
    use rand::Rng;
    let mut r = rng::stream(&[seed, tag::GRADCHECK]);
    let data = (0..in_channels * side * side).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let batch = Tensor::from_vec(&[1, in_channels, side, side], data).expect("probe batch dims");
    let labels = LabelMap::from_vec(
        side,
        side,
        (0..side * side).map(|_| r.random_range(0..classes as u8)).collect(),
    )
    .expect("probe label dims");
    (batch, labels)
}

pub fn run(cfg: &RunConfig, inject_fault: bool, out: &Path, log: &mut RunLog) -> Result<i32> {
    prepare_out(out, cfg)?;
    let fault = if inject_fault { Fault::SignFlip } else { Fault::None };
    log.line(format!(
        "gradcheck: layer tolerance {LAYER_TOL:e}, model tolerance {MODEL_TOL:e}, seed {}{}",
        cfg.seed,
        if inject_fault { ", sign fault injected" } else { "" }
    ));

    let layers = layer_suite(LAYER_TOL, fault, cfg.seed)?;
    for case in &layers.cases {
        log.line(case_line(case));
    }

    let mini = ModelConfig::gradcheck_mini();
    let mut model = build_model(&mini, cfg.seed)?;
    let (batch, labels) = probe_batch(cfg.seed, mini.in_channels, mini.classes, 16);
    let model_case = check_model(
        &mut model.graph,
        &batch,
        &[labels],
        MODEL_SAMPLES,
        MODEL_TOL,
        cfg.seed,
        fault,
    )?;
    log.line(case_line(&model_case));

    let passed = layers.passed && model_case.passed;
    let artifact = GradcheckArtifact { fault_injected: inject_fault, layers, model: model_case, passed };
    let path = out.join("gradcheck.json");
    let json = serde_json::to_string_pretty(&artifact)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    log.line(format!("gradcheck {}", if passed { "PASS" } else { "FAIL" }));
    log.save(&out.join("run.log"))?;
    Ok(if passed { 0 } else { 1 })
}

fn case_line(case: &CaseReport) -> String {
    format!(
        "case {}: checked {} skipped {} max_rel {:.3e} {}",
        case.name,
        case.checked,
        case.skipped,
        case.max_rel,
        if case.passed { "PASS" } else { "FAIL" }
    )
}
