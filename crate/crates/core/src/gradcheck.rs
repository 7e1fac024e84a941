//! Central finite-difference verification of every backward pass.
//!
//! Each analytic gradient is compared against `(f(x+h) - f(x-h)) / 2h`
//! with `h = 1e-5 * max(1, |x|)`, all in 64-bit. The comparison uses a
//! guarded relative error `|a - n| / max(1e-3, |a|, |n|)`, so gradients of
//! ordinary magnitude are compared relatively while coordinates whose
//! true gradient is tiny are not failed on finite-difference noise.
//!
//! Networks with ReLU and max pooling are only piecewise smooth, and a
//! probe interval that happens to straddle a kink (a pre-activation
//! within `h` of zero, two pool candidates within `h` of each other)
//! makes the central difference meaningless no matter how correct the
//! backward pass is. A failing coordinate is therefore retried with the
//! step shrunk 16x and then 64x: a grazed kink falls outside the smaller
//! interval and the retry passes, while a genuinely wrong gradient keeps
//! disagreeing at every step size.
//!
//! A kink can also sit exactly at the evaluation point — a zero bias fed
//! by an all-zero post-ReLU neighborhood puts the pre-activation at
//! exactly zero, where no step size helps: the central difference
//! permanently reports the average of the two one-sided slopes while the
//! backward pass uses the conventional subgradient. After the ladder is
//! exhausted the two one-sided differences are compared; if they disagree
//! decisively the coordinate is genuinely non-differentiable and is
//! recorded as skipped rather than failed. Skips are counted and capped
//! (more than 10% skipped fails the case), and a wrong-but-smooth
//! gradient — a sign flip, a dropped term — still fails because its
//! one-sided slopes agree with each other.
//!
//! The checker itself is validated by fault injection: running a suite
//! with [`Fault::SignFlip`] negates the analytic gradients and must make
//! the suite fail, proving the harness can actually detect a broken
//! backward pass.
//!
//! Dropout is excluded: its training-mode output is a random function, so
//! finite differences do not apply. Its backward pass (an element-wise
//! mask product) is covered by exact unit tests instead.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Mode, ModelGraph};
use crate::layers;
use crate::rng;
use crate::tensor::{LabelMap, Tensor};
use crate::train::cross_entropy_loss;

/// Optional defect injected into the comparison, as a mutation control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Compare the true analytic gradients.
    None,
    /// Negate the analytic gradients; the check must fail.
    SignFlip,
}

/// Outcome of checking one case (one layer configuration or one model).
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: String,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates found non-differentiable and excluded (see module
    /// docs); at most 10% of probes may be skipped.
    pub skipped: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub passed: bool,
    /// Analytic and numeric value at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Outcome of a whole suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub max_rel: f64,
    pub passed: bool,
    pub cases: Vec<CaseReport>,
}

impl GradReport {
    fn from_cases(tolerance: f64, cases: Vec<CaseReport>) -> Self {
        let max_rel = cases.iter().map(|c| c.max_rel).fold(0.0, f64::max);
        let passed = cases.iter().all(|c| c.passed);
        GradReport { tolerance, max_rel, passed, cases }
    }
}

fn guarded_rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// What probing one coordinate concluded.
enum Probe {
    /// Relative error and numeric estimate of the accepted level (or of
    /// the smallest step, if every level failed).
    Compared(f64, f64),
    /// The coordinate sits on a non-differentiable point.
    NonDifferentiable,
}

/// Central difference of `eval_at` around `x0`, compared to `analytic`
/// at shrinking step sizes, with one-sided slope comparison at the last
/// level (see the module docs on kinks).
fn fd_probe(
    x0: f64,
    analytic: f64,
    tol: f64,
    eval_at: &mut dyn FnMut(f64) -> Result<f64>,
) -> Result<Probe> {
    let base = 1e-5 * x0.abs().max(1.0);
    let mut last = (f64::INFINITY, 0.0);
    let levels = [1.0, 16.0, 64.0];
    for (li, div) in levels.iter().enumerate() {
        let h = base / div;
        let fp = eval_at(x0 + h)?;
        let fm = eval_at(x0 - h)?;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = guarded_rel(analytic, numeric);
        last = (rel, numeric);
        if rel <= tol {
            return Ok(Probe::Compared(rel, numeric));
        }
        if li == levels.len() - 1 {
            // At this step size the one-sided slopes of a smooth
            // function agree to ~1e-3 relative; a decisive disagreement
            // means a kink at the point itself.
            let f0 = eval_at(x0)?;
            let left = (f0 - fm) / h;
            let right = (fp - f0) / h;
            if guarded_rel(left, right) > 0.05 {
                return Ok(Probe::NonDifferentiable);
            }
        }
    }
    Ok(Probe::Compared(last.0, last.1))
}

/// Compares `analytic` gradients for every coordinate of every operand
/// against central differences of `objective`.
fn check_case(
    name: &str,
    operands: &[Tensor],
    objective: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    tol: f64,
    fault: Fault,
) -> Result<CaseReport> {
    if operands.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{name}: {} analytic gradients for {} operands",
            analytic.len(),
            operands.len()
        )));
    }
    let mut ops = operands.to_vec();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let (mut worst_a, mut worst_n) = (0.0f64, 0.0f64);

    for oi in 0..ops.len() {
        if analytic[oi].shape() != ops[oi].shape() {
            return Err(Error::Shape(format!(
                "{name}: gradient shape {:?} does not match operand {:?}",
                analytic[oi].shape(),
                ops[oi].shape()
            )));
        }
        for ci in 0..ops[oi].len() {
            let x0 = ops[oi].data()[ci];
            let mut a = analytic[oi].data()[ci];
            if fault == Fault::SignFlip {
                a = -a;
            }
            let probe = fd_probe(x0, a, tol, &mut |v| {
                ops[oi].data_mut()[ci] = v;
                let f = objective(&ops);
                ops[oi].data_mut()[ci] = x0;
                f
            })?;
            match probe {
                Probe::NonDifferentiable => skipped += 1,
                Probe::Compared(rel, numeric) => {
                    checked += 1;
                    sum_rel += rel;
                    if rel > max_rel {
                        max_rel = rel;
                        worst_a = a;
                        worst_n = numeric;
                    }
                }
            }
        }
    }
    Ok(case_report(name, checked, skipped, max_rel, sum_rel, worst_a, worst_n, tol))
}

#[allow(clippy::too_many_arguments)]
fn case_report(
    name: &str,
    checked: usize,
    skipped: usize,
    max_rel: f64,
    sum_rel: f64,
    worst_a: f64,
    worst_n: f64,
    tol: f64,
) -> CaseReport {
    CaseReport {
        name: name.to_string(),
        checked,
        skipped,
        max_rel,
        mean_rel: if checked == 0 { 0.0 } else { sum_rel / checked as f64 },
        passed: max_rel <= tol && checked > 0 && skipped * 10 <= checked,
        worst_analytic: worst_a,
        worst_numeric: worst_n,
    }
}

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: &[u64]) -> Tensor {
    let mut r = rng::stream(seed);
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| lo + (hi - lo) * r.random::<f64>()).collect())
        .unwrap()
}

/// A fixed random projection turning a tensor-valued layer into a scalar
/// objective: `L(out) = sum(c * out)`. Its gradient at the output is `c`,
/// which becomes the upstream tensor fed to the layer's backward pass.
fn projection_like(t: &Tensor, seed: &[u64]) -> Tensor {
    uniform_tensor(t.shape(), -1.0, 1.0, seed)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs finite-difference checks over every differentiable layer kind:
/// convolution (dilations 1–3 and a strided case), ReLU, max pooling,
/// batch norm in both modes, bilinear resize both directions, elementwise
/// sum, softmax, and the fused softmax cross-entropy.
pub fn layer_suite(tol: f64, fault: Fault, seed: u64) -> Result<GradReport> {
    let mut cases = Vec::new();

    // Convolutions over a range of geometries.
    for (name, geom) in [
        ("conv_d1", layers::ConvGeom::dilated(1)),
        ("conv_d2", layers::ConvGeom::dilated(2)),
        ("conv_d3", layers::ConvGeom::dilated(3)),
        ("conv_stride2", layers::ConvGeom { stride: 2, dilation: 1, padding: 1 }),
    ] {
        let x = uniform_tensor(&[2, 2, 8, 9], -1.0, 1.0, &[seed, 1, geom.dilation as u64]);
        let w = uniform_tensor(&[3, 2, 3, 3], -0.7, 0.7, &[seed, 2, geom.dilation as u64]);
        let b = uniform_tensor(&[3], -0.2, 0.2, &[seed, 3, geom.stride as u64]);
        let out = layers::conv2d(&x, &w, &b, &geom)?;
        let c = projection_like(&out, &[seed, 4, geom.dilation as u64]);
        let grads = layers::conv2d_backward(&x, &w, &geom, &c)?;
        cases.push(check_case(
            name,
            &[x.clone(), w.clone(), b.clone()],
            &mut |ops| Ok(dot(&layers::conv2d(&ops[0], &ops[1], &ops[2], &geom)?, &c)),
            &[grads.input, grads.weights, grads.bias],
            tol,
            fault,
        )?);
    }

    // ReLU, with inputs kept away from the kink at zero.
    {
        let mut x = uniform_tensor(&[1, 2, 5, 5], -1.0, 1.0, &[seed, 5]);
        x.data_mut().iter_mut().for_each(|v| *v += 0.05 * v.signum());
        let c = projection_like(&x, &[seed, 6]);
        let g = layers::relu_backward(&x, &c)?;
        cases.push(check_case(
            "relu",
            std::slice::from_ref(&x),
            &mut |ops| Ok(dot(&layers::relu(&ops[0]), &c)),
            &[g],
            tol,
            fault,
        )?);
    }

    // Max pooling, with pairwise-distinct values so probes cannot flip a
    // window's winner.
    {
        let len = 2 * 6 * 7;
        let mut order: Vec<usize> = (0..len).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(&[seed, 7]));
        let data: Vec<f64> = order.iter().map(|&i| i as f64 * 0.03 - 1.0).collect();
        let x = Tensor::from_vec(&[1, 2, 6, 7], data)?;
        let (out, idx) = layers::maxpool2x2(&x)?;
        let c = projection_like(&out, &[seed, 8]);
        let g = layers::maxpool2x2_backward(x.shape(), &idx, &c)?;
        cases.push(check_case(
            "maxpool",
            std::slice::from_ref(&x),
            &mut |ops| {
                let (o, _) = layers::maxpool2x2(&ops[0])?;
                Ok(dot(&o, &c))
            },
            &[g],
            tol,
            fault,
        )?);
    }

    // Batch norm, training mode: finite differences see the batch
    // statistics change with the input, so this validates the full
    // mean/variance chain.
    {
        let x = uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0, &[seed, 9]);
        let gamma = uniform_tensor(&[3], 0.5, 1.5, &[seed, 10]);
        let beta = uniform_tensor(&[3], -0.5, 0.5, &[seed, 11]);
        let eps = 1e-5;
        let (out, cache) = layers::batchnorm_train(&x, &gamma, &beta, eps)?;
        let c = projection_like(&out, &[seed, 12]);
        let g = layers::batchnorm_backward_train(&cache, &gamma, &c)?;
        cases.push(check_case(
            "batchnorm_train",
            &[x.clone(), gamma.clone(), beta.clone()],
            &mut |ops| {
                let (o, _) = layers::batchnorm_train(&ops[0], &ops[1], &ops[2], eps)?;
                Ok(dot(&o, &c))
            },
            &[g.input, g.gamma, g.beta],
            tol,
            fault,
        )?);
    }

    // Batch norm, evaluation mode: running statistics are constants.
    {
        let x = uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0, &[seed, 13]);
        let gamma = uniform_tensor(&[3], 0.5, 1.5, &[seed, 14]);
        let beta = uniform_tensor(&[3], -0.5, 0.5, &[seed, 15]);
        let rm = uniform_tensor(&[3], -0.5, 0.5, &[seed, 16]);
        let rv = uniform_tensor(&[3], 0.5, 1.5, &[seed, 17]);
        let eps = 1e-5;
        let out = layers::batchnorm_eval(&x, &gamma, &beta, &rm, &rv, eps)?;
        let c = projection_like(&out, &[seed, 18]);
        let g = layers::batchnorm_backward_eval(&x, &gamma, &rm, &rv, eps, &c)?;
        cases.push(check_case(
            "batchnorm_eval",
            &[x.clone(), gamma.clone(), beta.clone()],
            &mut |ops| {
                Ok(dot(&layers::batchnorm_eval(&ops[0], &ops[1], &ops[2], &rm, &rv, eps)?, &c))
            },
            &[g.input, g.gamma, g.beta],
            tol,
            fault,
        )?);
    }

    // Bilinear resize, both directions.
    for (name, in_hw, out_hw) in
        [("bilinear_up", (4, 5), (9, 7)), ("bilinear_down", (7, 9), (3, 4))]
    {
        let x = uniform_tensor(&[1, 2, in_hw.0, in_hw.1], -1.0, 1.0, &[seed, 19, in_hw.0 as u64]);
        let out = layers::bilinear_resize(&x, out_hw.0, out_hw.1)?;
        let c = projection_like(&out, &[seed, 20, out_hw.0 as u64]);
        let g = layers::bilinear_resize_backward(in_hw.0, in_hw.1, &c)?;
        cases.push(check_case(
            name,
            std::slice::from_ref(&x),
            &mut |ops| Ok(dot(&layers::bilinear_resize(&ops[0], out_hw.0, out_hw.1)?, &c)),
            &[g],
            tol,
            fault,
        )?);
    }

    // Elementwise sum.
    {
        let a = uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0, &[seed, 21]);
        let b = uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0, &[seed, 22]);
        let c = projection_like(&a, &[seed, 23]);
        cases.push(check_case(
            "elementwise_sum",
            &[a.clone(), b.clone()],
            &mut |ops| Ok(dot(&crate::tensor::elementwise_sum(&ops[0], &ops[1])?, &c)),
            &[c.clone(), c.clone()],
            tol,
            fault,
        )?);
    }

    // Softmax through a random projection.
    {
        let x = uniform_tensor(&[1, 5, 3, 3], -2.0, 2.0, &[seed, 24]);
        let probs = layers::softmax_channels(&x)?;
        let c = projection_like(&probs, &[seed, 25]);
        let g = layers::softmax_backward(&probs, &c)?;
        cases.push(check_case(
            "softmax",
            std::slice::from_ref(&x),
            &mut |ops| Ok(dot(&layers::softmax_channels(&ops[0])?, &c)),
            &[g],
            tol,
            fault,
        )?);
    }

    // Fused softmax cross-entropy: the objective is the loss itself.
    {
        let logits = uniform_tensor(&[2, 4, 3, 3], -2.0, 2.0, &[seed, 26]);
        let mut r = rng::stream(&[seed, 27]);
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| {
                LabelMap::from_vec(
                    3,
                    3,
                    (0..9).map(|_| r.random_range(0..4u8)).collect(),
                )
                .unwrap()
            })
            .collect();
        let out = cross_entropy_loss(&logits, &labels, None)?;
        cases.push(check_case(
            "softmax_cross_entropy",
            std::slice::from_ref(&logits),
            &mut |ops| Ok(cross_entropy_loss(&ops[0], &labels, None)?.loss),
            &[out.grad],
            tol,
            fault,
        )?);
    }

    Ok(GradReport::from_cases(tol, cases))
}

/// Finite-difference check of an assembled model.
///
/// The objective is the cross-entropy of the model's evaluation-mode
/// output against fixed labels (evaluation mode keeps the objective
/// deterministic: no dropout, running batch-norm statistics). Analytic
/// gradients come from one backward pass; then `samples` coordinates are
/// drawn without replacement from the concatenation of all parameters and
/// the input batch, and each is probed with central differences.
pub fn check_model(
    model: &mut ModelGraph,
    batch: &Tensor,
    labels: &[LabelMap],
    samples: usize,
    tol: f64,
    seed: u64,
    fault: Fault,
) -> Result<CaseReport> {
    // Analytic pass.
    model.zero_param_grads();
    let logits = model.forward(batch, Mode::Eval)?;
    let out = cross_entropy_loss(&logits, labels, None)?;
    model.backward(&out.grad)?;

    let mut param_grads: Vec<Tensor> = Vec::new();
    let mut param_sizes: Vec<usize> = Vec::new();
    model.visit_params_mut(&mut |_, p| {
        param_grads.push(p.grad.clone());
        param_sizes.push(p.value.len());
    });
    let input_grad = model
        .input_grad()
        .ok_or_else(|| Error::Graph("model backward produced no input gradient".into()))?
        .clone();

    let param_total: usize = param_sizes.iter().sum();
    let total = param_total + batch.len();
    let samples = samples.min(total);
    let mut r = rng::stream(&[seed, rng::tag::GRADCHECK]);
    let picked = rand::seq::index::sample(&mut r, total, samples);

    // Locates a flat coordinate: parameter tensors first, then the input.
    let locate = |flat: usize| -> (Option<usize>, usize) {
        let mut rest = flat;
        for (pi, &size) in param_sizes.iter().enumerate() {
            if rest < size {
                return (Some(pi), rest);
            }
            rest -= size;
        }
        (None, rest)
    };

    let mut probe_batch = batch.clone();
    let objective = |model: &mut ModelGraph, b: &Tensor| -> Result<f64> {
        Ok(cross_entropy_loss(&model.forward(b, Mode::Eval)?, labels, None)?.loss)
    };

    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let (mut worst_a, mut worst_n) = (0.0f64, 0.0f64);

    for flat in picked {
        let (param, offset) = locate(flat);
        let analytic_raw = match param {
            Some(pi) => param_grads[pi].data()[offset],
            None => input_grad.data()[offset],
        };
        let analytic = if fault == Fault::SignFlip { -analytic_raw } else { analytic_raw };
        let probe = match param {
            Some(pi) => {
                let x0 = set_param(model, pi, offset, None);
                fd_probe(x0, analytic, tol, &mut |v| {
                    set_param(model, pi, offset, Some(v));
                    let f = objective(model, &probe_batch);
                    set_param(model, pi, offset, Some(x0));
                    f
                })?
            }
            None => {
                let x0 = probe_batch.data()[offset];
                fd_probe(x0, analytic, tol, &mut |v| {
                    probe_batch.data_mut()[offset] = v;
                    let f = objective(model, &probe_batch);
                    probe_batch.data_mut()[offset] = x0;
                    f
                })?
            }
        };
        match probe {
            Probe::NonDifferentiable => skipped += 1,
            Probe::Compared(rel, numeric) => {
                checked += 1;
                sum_rel += rel;
                if rel > max_rel {
                    max_rel = rel;
                    worst_a = analytic;
                    worst_n = numeric;
                }
            }
        }
    }

    Ok(case_report("model", checked, skipped, max_rel, sum_rel, worst_a, worst_n, tol))
}

/// Reads (and optionally writes) one scalar of the `pi`-th parameter
/// tensor, returning its previous value.
fn set_param(model: &mut ModelGraph, pi: usize, offset: usize, value: Option<f64>) -> f64 {
    let mut idx = 0usize;
    let mut old = 0.0;
    model.visit_params_mut(&mut |_, p| {
        if idx == pi {
            old = p.value.data()[offset];
            if let Some(v) = value {
                p.value.data_mut()[offset] = v;
            }
        }
        idx += 1;
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Op, INPUT};
    use crate::layers::{ConvGeom, ConvParams};

    #[test]
    fn layer_suite_passes_at_tolerance() {
        let report = layer_suite(1e-4, Fault::None, 33).unwrap();
        for case in &report.cases {
            assert!(case.passed, "{}: max_rel {}", case.name, case.max_rel);
        }
        assert!(report.passed);
        assert_eq!(report.cases.len(), 13);
    }

    #[test]
    fn sign_flip_fault_is_detected() {
        let report = layer_suite(1e-4, Fault::SignFlip, 33).unwrap();
        assert!(!report.passed, "sign-flipped gradients must fail the suite");
        // Every case has at least one nonzero gradient, so every case fails.
        for case in &report.cases {
            assert!(!case.passed, "{} should have failed", case.name);
        }
    }

    #[test]
    fn small_model_check_passes_and_detects_faults() {
        let mut g = ModelGraph::new();
        let c1 = ConvParams::he_init("c1.w", 4, 2, 3, 3, ConvGeom::padded(1), 3).unwrap();
        let c2 = ConvParams::he_init("c2.w", 3, 4, 1, 1, ConvGeom::padded(0), 4).unwrap();
        let a = g.add("c1", Op::Conv(c1), &[INPUT]).unwrap();
        let r = g.add("r1", Op::Relu, &[a]).unwrap();
        let b = g.add("c2", Op::Conv(c2), &[r]).unwrap();
        g.set_output(b).unwrap();

        let batch = uniform_tensor(&[1, 2, 6, 6], -1.0, 1.0, &[50]);
        let mut rr = rng::stream(&[51]);
        let labels = vec![LabelMap::from_vec(
            6,
            6,
            (0..36).map(|_| rr.random_range(0..3u8)).collect(),
        )
        .unwrap()];

        let ok = check_model(&mut g, &batch, &labels, 80, 1e-3, 7, Fault::None).unwrap();
        assert!(ok.passed, "max_rel {} skipped {}", ok.max_rel, ok.skipped);
        assert_eq!(ok.checked + ok.skipped, 80);

        let bad = check_model(&mut g, &batch, &labels, 80, 1e-3, 7, Fault::SignFlip).unwrap();
        assert!(!bad.passed);
    }
}
