//! Loss, optimizer and the training loop.
//!
//! The objective is pixel-wise softmax cross-entropy normalized by the
//! number of contributing pixels, optimized with momentum SGD under a
//! stepped learning-rate schedule. Training is fully deterministic for a
//! given seed: epoch shuffles and dropout masks derive from the run seed
//! and their position in the run (see [`crate::rng`]), so a run resumed
//! from a checkpoint continues exactly as the uninterrupted run would
//! have.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::IgnoreMask;
use crate::graph::{Mode, ModelGraph};
use crate::rng;
use crate::tensor::{LabelMap, Tensor};

/// Scalar loss plus its gradient with respect to the logits.
#[derive(Debug)]
pub struct LossOutput {
    /// Mean negative log-likelihood per contributing pixel, in nats.
    pub loss: f64,
    /// Same shape as the logits; zero at ignored pixels.
    pub grad: Tensor,
}

/// Softmax cross-entropy over a `[n, k, h, w]` logit tensor against `n`
/// label maps, averaged over the contributing pixels.
///
/// The per-pixel loss is computed as `logsumexp(logits) - logit[label]`,
/// which never overflows and never takes the log of zero. The gradient at
/// a contributing pixel is `(softmax - onehot(label)) / D` with `D` the
/// total number of contributing pixels; ignored pixels contribute nothing
/// to either value.
pub fn cross_entropy_loss(
    logits: &Tensor,
    labels: &[LabelMap],
    masks: Option<&[IgnoreMask]>,
) -> Result<LossOutput> {
    let (n, k, h, w) = logits.dims4()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} label maps for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != n {
            return Err(Error::Shape(format!("{} ignore masks for a batch of {n}", m.len())));
        }
    }
    for lm in labels {
        if lm.height() != h || lm.width() != w {
            return Err(Error::Shape(format!(
                "label map {}x{} does not match logits {h}x{w}",
                lm.height(),
                lm.width()
            )));
        }
    }

    // First pass: count contributing pixels so the gradient can be
    // normalized in a single sweep.
    let mut contributing = 0u64;
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                if !masks.is_some_and(|m| m[bi].ignored(y, x)) {
                    contributing += 1;
                }
            }
        }
    }
    if contributing == 0 {
        return Err(Error::Config("loss undefined: every pixel is ignored".into()));
    }
    let inv_d = 1.0 / contributing as f64;

    let xd = logits.data();
    let plane = h * w;
    let mut grad = Tensor::zeros_like(logits);
    let gd = grad.data_mut();
    let mut total = 0.0f64;

    for bi in 0..n {
        let base = bi * k * plane;
        for y in 0..h {
            for x in 0..w {
                if masks.is_some_and(|m| m[bi].ignored(y, x)) {
                    continue;
                }
                let p = y * w + x;
                let label = labels[bi].at(y, x) as usize;
                if label >= k {
                    return Err(Error::Shape(format!(
                        "label {label} out of range for {k} classes"
                    )));
                }
                let mut m = f64::NEG_INFINITY;
                for ch in 0..k {
                    m = m.max(xd[base + ch * plane + p]);
                }
                let mut sum = 0.0;
                for ch in 0..k {
                    sum += (xd[base + ch * plane + p] - m).exp();
                }
                let lse = m + sum.ln();
                total += lse - xd[base + label * plane + p];
                for ch in 0..k {
                    let prob = (xd[base + ch * plane + p] - lse).exp();
                    let indicator = if ch == label { 1.0 } else { 0.0 };
                    gd[base + ch * plane + p] = (prob - indicator) * inv_d;
                }
            }
        }
    }
    Ok(LossOutput { loss: total * inv_d, grad })
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplier applied to the learning rate every `lr_drop_every` epochs.
    pub lr_drop_factor: f64,
    /// Epoch interval between learning-rate drops.
    pub lr_drop_every: usize,
    /// Momentum coefficient of the velocity update.
    pub momentum: f64,
    /// L2 penalty coefficient; applies to convolution weights only, not
    /// to biases or batch-norm scale/shift.
    pub weight_decay: f64,
    /// Patches per optimization step.
    pub batch_size: usize,
    /// Number of passes over the training set.
    pub epochs: usize,
    /// If set, each epoch trains on a fresh seeded sample of this many
    /// patches instead of the whole set, rotating through the data over
    /// the course of training.
    pub patches_per_epoch: Option<usize>,
    /// Run seed; drives shuffling and dropout.
    pub seed: u64,
    /// If set, training stops once training-set pixel accuracy reaches
    /// this value (checked every `accuracy_check_every` epochs).
    pub stop_at_accuracy: Option<f64>,
    /// Epoch interval of the early-stop accuracy check.
    pub accuracy_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_drop_factor: 0.1,
            lr_drop_every: 20,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            epochs: 80,
            patches_per_epoch: None,
            seed: 0,
            stop_at_accuracy: None,
            accuracy_check_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_drop_factor must be in (0,1], got {}",
                self.lr_drop_factor
            )));
        }
        if self.lr_drop_every == 0 {
            return Err(Error::Config("lr_drop_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patches_per_epoch == Some(0) {
            return Err(Error::Config("patches_per_epoch must be at least 1 when set".into()));
        }
        if self.accuracy_check_every == 0 {
            return Err(Error::Config("accuracy_check_every must be at least 1".into()));
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "stop_at_accuracy must be in [0,1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// The stepped schedule: `lr0 * factor^(epoch / every)` with integer
/// division, so the rate is constant within each block of `every` epochs.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_drop_factor.powi((epoch / cfg.lr_drop_every) as i32)
}

/// Momentum buffers, one per learnable parameter in declaration order.
pub struct SgdState {
    pub velocities: Vec<Tensor>,
}

impl SgdState {
    /// Zero velocities matching the model's parameters.
    pub fn new(model: &mut ModelGraph) -> Self {
        let mut velocities = Vec::new();
        model.visit_params_mut(&mut |_, p| velocities.push(Tensor::zeros_like(&p.value)));
        SgdState { velocities }
    }
}

/// One momentum-SGD update from the gradients currently accumulated in
/// the model:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param   (decay on weights only)
/// param <- param - lr(epoch) * v
/// ```
pub fn sgd_step(
    model: &mut ModelGraph,
    state: &mut SgdState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let lr = learning_rate(cfg, epoch);
    let mut idx = 0usize;
    let mut status = Ok(());
    model.visit_params_mut(&mut |meta, p| {
        if status.is_err() {
            return;
        }
        let Some(v) = state.velocities.get_mut(idx) else {
            status = Err(Error::Config("optimizer state shorter than parameter list".into()));
            return;
        };
        idx += 1;
        if v.shape() != p.value.shape() {
            status = Err(Error::Shape(format!(
                "velocity shape {:?} does not match parameter {} {:?}",
                v.shape(),
                meta.name,
                p.value.shape()
            )));
            return;
        }
        let decay = if meta.decay { cfg.weight_decay } else { 0.0 };
        let vd = v.data_mut();
        let pd = p.value.data_mut();
        let gd = p.grad.data();
        for i in 0..vd.len() {
            vd[i] = cfg.momentum * vd[i] + gd[i] + decay * pd[i];
            pd[i] -= lr * vd[i];
        }
    });
    status?;
    if idx != state.velocities.len() {
        return Err(Error::Config("optimizer state longer than parameter list".into()));
    }
    Ok(())
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean step loss over the epoch, nats per pixel.
    pub mean_loss: f64,
    pub lr: f64,
    /// Training-set pixel accuracy, when the early-stop check measured it.
    pub accuracy: Option<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// True if `stop_at_accuracy` ended the run before `epochs` epochs.
    pub stopped_early: bool,
}

/// Stacks `[c, h, w]` images into a `[n, c, h, w]` batch.
pub fn stack_batch(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let (c, h, w) = first.dims3()?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// Fraction of pixels whose argmax prediction matches the labels,
/// evaluated in eval mode over all examples.
pub fn pixel_accuracy(
    model: &mut ModelGraph,
    data: &[(Tensor, LabelMap)],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("accuracy of an empty dataset".into()));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|(img, _)| img).collect();
        let logits = model.forward(&stack_batch(&images)?, Mode::Eval)?;
        let preds = crate::layers::argmax_channels(&logits)?;
        for ((_, gt), pred) in chunk.iter().zip(&preds) {
            for y in 0..gt.height() {
                for x in 0..gt.width() {
                    total += 1;
                    if gt.at(y, x) == pred.at(y, x) {
                        correct += 1;
                    }
                }
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Trains `model` on `(image, labels)` pairs for `cfg.epochs` passes,
/// starting at `start_epoch` (non-zero when resuming from a checkpoint).
///
/// Each epoch visits a fresh seeded shuffle of the data in batches of
/// `cfg.batch_size`. Every step zeroes the accumulated gradients, runs
/// forward in training mode, computes the loss, backpropagates and applies
/// one SGD update. A non-finite loss aborts with [`Error::Diverged`].
/// `on_epoch` fires after every epoch with that epoch's statistics.
pub fn train_loop(
    model: &mut ModelGraph,
    data: &[(Tensor, LabelMap)],
    cfg: &TrainConfig,
    state: &mut SgdState,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut log = TrainLog { epochs: Vec::new(), stopped_early: false };

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(&[cfg.seed, rng::tag::SHUFFLE, epoch as u64]));
        if let Some(limit) = cfg.patches_per_epoch {
            // A shuffle prefix is a uniform subset; each epoch rotates
            // through different patches.
            order.truncate(limit.min(order.len()));
        }

        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Tensor> = batch_idx.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<LabelMap> =
                batch_idx.iter().map(|&i| data[i].1.clone()).collect();
            let batch = stack_batch(&images)?;

            model.zero_param_grads();
            let step_seed = rng::mix(&[cfg.seed, epoch as u64, step as u64]);
            let logits = model.forward(&batch, Mode::Train { seed: step_seed })?;
            let out = cross_entropy_loss(&logits, &labels, None)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            model.backward(&out.grad)?;
            sgd_step(model, state, cfg, epoch)?;
            loss_sum += out.loss;
            steps += 1;
        }

        let mut stats = EpochStats {
            epoch,
            mean_loss: loss_sum / steps.max(1) as f64,
            lr: learning_rate(cfg, epoch),
            accuracy: None,
        };

        if let Some(target) = cfg.stop_at_accuracy {
            let due = (epoch + 1) % cfg.accuracy_check_every == 0 || epoch + 1 == cfg.epochs;
            if due {
                let acc = pixel_accuracy(model, data, cfg.batch_size)?;
                stats.accuracy = Some(acc);
                if acc >= target {
                    on_epoch(&stats);
                    log.epochs.push(stats);
                    log.stopped_early = true;
                    return Ok(log);
                }
            }
        }
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Op, INPUT};
    use crate::layers::{ConvGeom, ConvParams};

    #[test]
    fn uniform_logits_cost_ln_k() {
        // Identical logits at every pixel: the softmax is uniform, so the
        // loss is exactly ln(K) and gradient channel sums vanish.
        for k in [2usize, 4, 6] {
            let logits = Tensor::new(&[2, k, 3, 5], 0.7).unwrap();
            let labels = vec![
                LabelMap::new(3, 5, 0).unwrap(),
                LabelMap::new(3, 5, (k - 1) as u8).unwrap(),
            ];
            let out = cross_entropy_loss(&logits, &labels, None).unwrap();
            assert!(
                (out.loss - (k as f64).ln()).abs() < 1e-9,
                "k={k}: {} vs {}",
                out.loss,
                (k as f64).ln()
            );
            // Per-pixel gradient sums to zero across channels.
            let plane = 15;
            for bi in 0..2 {
                for p in 0..plane {
                    let s: f64 =
                        (0..k).map(|ch| out.grad.data()[(bi * k + ch) * plane + p]).sum();
                    assert!(s.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_hand_case() {
        // Two classes, one pixel, logits (0,0), label 0: p = (1/2, 1/2),
        // loss = ln 2, grad = (p - onehot) / 1 = (-1/2, 1/2).
        let logits = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        let labels = vec![LabelMap::new(1, 1, 0).unwrap()];
        let out = cross_entropy_loss(&logits, &labels, None).unwrap();
        assert!((out.loss - 2.0f64.ln()).abs() < 1e-15);
        assert!((out.grad.data()[0] + 0.5).abs() < 1e-15);
        assert!((out.grad.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_respects_ignore_masks() {
        let logits = Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        let labels = vec![LabelMap::from_vec(1, 2, vec![0, 0]).unwrap()];

        // Ignore the second pixel: only the first contributes, with
        // per-pixel loss ln(1 + e^-3) and D = 1.
        let mask = vec![IgnoreMask::from_flags(1, 2, vec![false, true]).unwrap()];
        let masked = cross_entropy_loss(&logits, &labels, Some(&mask)).unwrap();
        let expect = (1.0 + (-3.0f64).exp()).ln();
        assert!((masked.loss - expect).abs() < 1e-12);
        // The ignored pixel's gradient stays zero in every channel.
        assert_eq!(masked.grad.data()[1], 0.0);
        assert_eq!(masked.grad.data()[3], 0.0);
        assert!(masked.grad.data()[0] < 0.0);

        // All pixels ignored: undefined loss.
        let all = vec![IgnoreMask::from_flags(1, 2, vec![true, true]).unwrap()];
        assert!(cross_entropy_loss(&logits, &labels, Some(&all)).is_err());

        // Label out of range errors.
        let bad = vec![LabelMap::new(1, 2, 9).unwrap()];
        assert!(cross_entropy_loss(&logits, &bad, None).is_err());
    }

    #[test]
    fn config_rejects_degenerate_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { patches_per_epoch: Some(0), ..ok.clone() },
            TrainConfig { lr0: 0.0, ..ok.clone() },
            TrainConfig { lr_drop_factor: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
        ] {
            assert!(broken.validate().is_err(), "accepted {broken:?}");
        }
    }

    #[test]
    fn schedule_steps_down_by_factor() {
        let cfg = TrainConfig::default();
        assert!((learning_rate(&cfg, 0) - 0.01).abs() < 1e-15);
        assert!((learning_rate(&cfg, 19) - 0.01).abs() < 1e-15);
        assert!((learning_rate(&cfg, 20) - 0.001).abs() < 1e-15);
        assert!((learning_rate(&cfg, 40) - 0.0001).abs() < 1e-15);
    }

    fn one_conv_model(k: usize) -> ModelGraph {
        let mut g = ModelGraph::new();
        let conv = ConvParams::he_init("c.w", k, 1, 1, 1, ConvGeom::padded(0), 11).unwrap();
        let c = g.add("c", Op::Conv(conv), &[INPUT]).unwrap();
        g.set_output(c).unwrap();
        g
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // Constant gradient g with momentum 0.9 and no decay: the first
        // step moves by lr*g, the second by 1.9*lr*g, 2.9*lr*g in total.
        let mut model = one_conv_model(1);
        let mut w0 = 0.0;
        model.visit_params_mut(&mut |meta, p| {
            if meta.name == "c.w" {
                w0 = p.value.data()[0];
            }
        });
        let cfg = TrainConfig {
            lr0: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&mut model);
        let g = 2.0;
        for _ in 0..2 {
            model.zero_param_grads();
            model.visit_params_mut(&mut |meta, p| {
                if meta.name == "c.w" {
                    p.grad.data_mut()[0] = g;
                }
            });
            sgd_step(&mut model, &mut state, &cfg, 0).unwrap();
        }
        let mut w2 = 0.0;
        model.visit_params_mut(&mut |meta, p| {
            if meta.name == "c.w" {
                w2 = p.value.data()[0];
            }
        });
        assert!((w0 - w2 - 2.9 * 0.5 * g).abs() < 1e-12, "moved {}", w0 - w2);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut model = one_conv_model(1);
        let cfg = TrainConfig {
            lr0: 1.0,
            momentum: 0.0,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&mut model);
        // Zero gradients everywhere: only decay moves parameters.
        let mut w0 = 0.0;
        model.visit_params_mut(&mut |meta, p| {
            if meta.name == "c.w" {
                w0 = p.value.data()[0];
            }
            if meta.name == "c.b" {
                p.value.data_mut()[0] = 3.0;
            }
        });
        sgd_step(&mut model, &mut state, &cfg, 0).unwrap();
        model.visit_params_mut(&mut |meta, p| {
            if meta.name == "c.w" {
                assert!((p.value.data()[0] - w0 * 0.9).abs() < 1e-12);
            }
            if meta.name == "c.b" {
                assert_eq!(p.value.data()[0], 3.0);
            }
        });
    }

    #[test]
    fn training_reduces_loss_on_a_toy_problem() {
        // One 1x1 conv from a 1-channel input to 2 classes; the label is 1
        // where the input is positive. Linearly separable, so a few epochs
        // of SGD must cut the loss substantially.
        let mut model = one_conv_model(2);
        let mut data = Vec::new();
        use rand::Rng;
        let mut r = crate::rng::stream(&[77]);
        for _ in 0..8 {
            let img = Tensor::from_vec(
                &[1, 6, 6],
                (0..36).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let mut lm = LabelMap::new(6, 6, 0).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    if img.data()[y * 6 + x] > 0.0 {
                        lm.set(y, x, 1);
                    }
                }
            }
            data.push((img, lm));
        }
        let cfg = TrainConfig {
            lr0: 0.5,
            lr_drop_every: 100,
            batch_size: 4,
            epochs: 30,
            seed: 5,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&mut model);
        let log = train_loop(&mut model, &data, &cfg, &mut state, 0, |_| {}).unwrap();
        let first = log.epochs.first().unwrap().mean_loss;
        let last = log.epochs.last().unwrap().mean_loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
        let acc = pixel_accuracy(&mut model, &data, 4).unwrap();
        assert!(acc > 0.9, "accuracy {acc}");
    }

    #[test]
    fn divergence_is_detected() {
        // Two stacked convolutions: logits scale with the product of the
        // layer magnitudes, so an absurd learning rate overflows f64 on
        // the next forward pass and the loss stops being finite.
        let mut model = ModelGraph::new();
        let c1 = ConvParams::he_init("c1.w", 2, 1, 1, 1, ConvGeom::padded(0), 11).unwrap();
        let c2 = ConvParams::he_init("c2.w", 2, 2, 1, 1, ConvGeom::padded(0), 12).unwrap();
        let a = model.add("c1", Op::Conv(c1), &[INPUT]).unwrap();
        let b = model.add("c2", Op::Conv(c2), &[a]).unwrap();
        model.set_output(b).unwrap();

        let data = vec![(
            Tensor::new(&[1, 4, 4], 1.0e3).unwrap(),
            LabelMap::new(4, 4, 0).unwrap(),
        )];
        let cfg = TrainConfig {
            lr0: 1.0e200,
            epochs: 5,
            batch_size: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&mut model);
        let err = train_loop(&mut model, &data, &cfg, &mut state, 0, |_| {});
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn shuffles_differ_between_epochs_but_not_runs() {
        let mk = |epoch: u64| {
            let mut v: Vec<usize> = (0..16).collect();
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng::stream(&[1, rng::tag::SHUFFLE, epoch]));
            v
        };
        assert_eq!(mk(0), mk(0));
        assert_ne!(mk(0), mk(1));
    }
}
