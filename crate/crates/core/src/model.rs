//! Full segmentation network: configuration, graph assembly, prediction,
//! and checkpoint I/O.
//!
//! The network is a VGG-style encoder (3x3 convolutions in stages, 2x2
//! max pooling between them) whose final features feed multi-scale
//! context aggregation, then a chain of coarse-to-fine refinement steps
//! fed by the last convolution of chosen shallower stages, then dropout,
//! a 1x1 classifier, and a bilinear resize back to input resolution. The
//! logits are produced at input resolution; softmax/argmax live in the
//! prediction helpers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    append_context_aggregation, append_refinement, AggregationMode, ContextAggregator,
    RefinementStep,
};
use crate::error::{Error, Result};
use crate::graph::{Mode, ModelGraph, NodeId, Op, INPUT};
use crate::layers::{argmax_channels, softmax_channels, ConvGeom, ConvParams};
use crate::tensor::{LabelMap, Tensor};
use crate::train::SgdState;

/// One encoder stage: `convs` 3x3 convolutions at `width` channels,
/// optionally followed by a 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub convs: usize,
    pub width: usize,
    pub pool: bool,
}

/// Everything needed to assemble the network. Deserializing fills
/// omitted fields from the desk preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Number of output classes K (at least 2, at most 256 so labels fit
    /// a byte).
    pub classes: usize,
    pub stages: Vec<StageConfig>,
    /// Insert batch normalization after every encoder convolution.
    pub use_batchnorm: bool,
    pub use_context: bool,
    pub context_mode: AggregationMode,
    /// Apply residual corrections at the context fusions.
    pub context_correction: bool,
    /// Dilation rates of the context branches, strictly decreasing.
    pub dilation_rates: Vec<usize>,
    pub use_refinement: bool,
    /// Stage indices (0-based) whose last convolution feeds each
    /// refinement step, deepest first; successive taps must be strictly
    /// finer, and no tap may be coarser than the encoder output.
    pub refinement_taps: Vec<usize>,
    /// Channel width of each refinement step's projections.
    pub refinement_widths: Vec<usize>,
    /// Apply a residual correction after each refinement fusion.
    pub refinement_correction: bool,
    /// Dropout rate before the classifier; 0 disables the layer.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes while
    /// keeping the architecture intact: 4 stages, stride 8, all
    /// components enabled.
    pub fn desk() -> Self {
        ModelConfig {
            in_channels: 3,
            classes: 4,
            stages: vec![
                StageConfig { convs: 2, width: 16, pool: true },
                StageConfig { convs: 2, width: 32, pool: true },
                StageConfig { convs: 2, width: 64, pool: true },
                StageConfig { convs: 2, width: 64, pool: false },
            ],
            use_batchnorm: false,
            use_context: true,
            context_mode: AggregationMode::Cascaded,
            context_correction: true,
            dilation_rates: vec![4, 3, 2, 1],
            use_refinement: true,
            refinement_taps: vec![2, 1],
            refinement_widths: vec![32, 16],
            refinement_correction: true,
            dropout_rate: 0.5,
        }
    }

    /// Full-size configuration as published: a 16-layer VGG-style
    /// encoder at stride 8, dilation rates 24/18/12/6, three refinement
    /// taps. Documentary — far too large to train in this environment.
    pub fn paper() -> Self {
        ModelConfig {
            in_channels: 3,
            classes: 6,
            stages: vec![
                StageConfig { convs: 2, width: 64, pool: true },
                StageConfig { convs: 2, width: 128, pool: true },
                StageConfig { convs: 3, width: 256, pool: true },
                StageConfig { convs: 3, width: 512, pool: false },
                StageConfig { convs: 3, width: 512, pool: false },
            ],
            use_batchnorm: false,
            use_context: true,
            context_mode: AggregationMode::Cascaded,
            context_correction: true,
            dilation_rates: vec![24, 18, 12, 6],
            use_refinement: true,
            refinement_taps: vec![3, 2, 1],
            refinement_widths: vec![512, 256, 128],
            refinement_correction: true,
            dropout_rate: 0.5,
        }
    }

    /// Desk configuration shrunk for full-network gradient checking on a
    /// 16x16 input: one pool fewer (stride 4) and two classes.
    pub fn gradcheck_mini() -> Self {
        let mut cfg = ModelConfig::desk();
        cfg.stages[2].pool = false;
        cfg.classes = 2;
        cfg
    }

    /// Total downsampling factor of the encoder (2 per pooled stage).
    pub fn stride(&self) -> usize {
        1 << self.stages.iter().filter(|s| s.pool).count()
    }

    /// Downsampling factor at stage `si`'s last convolution (before its
    /// own pool, if any).
    fn stage_factor(&self, si: usize) -> usize {
        1 << self.stages[..si].iter().filter(|s| s.pool).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..=256, got {}",
                self.classes
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for (si, s) in self.stages.iter().enumerate() {
            if s.convs == 0 || s.width == 0 {
                return Err(Error::Config(format!(
                    "stage {si} must have at least one convolution and one channel"
                )));
            }
        }
        if self.stages.iter().filter(|s| s.pool).count() >= usize::BITS as usize {
            return Err(Error::Config("too many pooling stages".into()));
        }
        if self.use_context {
            if self.dilation_rates.len() < 2 {
                return Err(Error::Config(
                    "context aggregation needs at least 2 dilation rates".into(),
                ));
            }
            for pair in self.dilation_rates.windows(2) {
                if pair[0] <= pair[1] {
                    return Err(Error::Config(format!(
                        "dilation rates must strictly decrease, got {} before {}",
                        pair[0], pair[1]
                    )));
                }
            }
            if self.dilation_rates.last() == Some(&0) {
                return Err(Error::Config("dilation rates must be at least 1".into()));
            }
        }
        if self.use_refinement {
            if self.refinement_taps.is_empty() {
                return Err(Error::Config("refinement needs at least one tap".into()));
            }
            if self.refinement_taps.len() != self.refinement_widths.len() {
                return Err(Error::Config(format!(
                    "{} refinement taps but {} widths",
                    self.refinement_taps.len(),
                    self.refinement_widths.len()
                )));
            }
            if self.refinement_widths.iter().any(|&w| w == 0) {
                return Err(Error::Config("refinement widths must be at least 1".into()));
            }
            for &tap in &self.refinement_taps {
                if tap >= self.stages.len() {
                    return Err(Error::Config(format!(
                        "refinement tap {tap} out of range for {} stages",
                        self.stages.len()
                    )));
                }
            }
            let first = self.refinement_taps[0];
            if self.stage_factor(first) > self.stride() {
                return Err(Error::Config(format!(
                    "refinement tap {first} is coarser than the encoder output"
                )));
            }
            for pair in self.refinement_taps.windows(2) {
                if self.stage_factor(pair[1]) >= self.stage_factor(pair[0]) {
                    return Err(Error::Config(format!(
                        "refinement taps must go strictly finer, but stage {} is not finer than stage {}",
                        pair[1], pair[0]
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// An assembled network: the compute graph plus the configuration that
/// built it.
pub struct Model {
    pub graph: ModelGraph,
    pub config: ModelConfig,
}

impl Model {
    /// Forward pass with the input-size contract enforced: spatial
    /// dimensions must be divisible by the encoder stride.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = batch.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let stride = self.config.stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the encoder stride {stride}"
            )));
        }
        self.graph.forward(batch, mode)
    }
}

/// Assembles the network described by `cfg`. All convolution weights are
/// He-initialized from streams keyed by (seed, parameter name) — except
/// the final 1x1 of every residual correction, which is zero — so one
/// seed yields bit-identical parameters for shared layers across model
/// variants.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut g = ModelGraph::new();

    // Encoder stages; remember each stage's last convolution output
    // (after its activation) as the refinement tap.
    let mut taps: Vec<NodeId> = Vec::with_capacity(cfg.stages.len());
    let mut prev = INPUT;
    let mut prev_width = cfg.in_channels;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for ci in 0..stage.convs {
            let name = format!("s{si}.c{ci}");
            let conv = ConvParams::he_init(
                &format!("{name}.w"),
                stage.width,
                prev_width,
                3,
                3,
                ConvGeom::padded(1),
                seed,
            )?;
            prev = g.add(name.clone(), Op::Conv(conv), &[prev])?;
            if cfg.use_batchnorm {
                let bn = crate::layers::BNParams::new(stage.width, 1e-5, 0.1)?;
                prev = g.add(format!("{name}.bn"), Op::BatchNorm(bn), &[prev])?;
            }
            prev = g.add(format!("{name}.relu"), Op::Relu, &[prev])?;
            prev_width = stage.width;
        }
        taps.push(prev);
        if stage.pool {
            prev = g.add(format!("s{si}.pool"), Op::MaxPool2x2, &[prev])?;
        }
    }

    // Context aggregation over the encoder output.
    let mut width = prev_width;
    if cfg.use_context {
        let agg = ContextAggregator::init(
            "ctx",
            width,
            &cfg.dilation_rates,
            cfg.context_mode,
            cfg.context_correction,
            seed,
        )?;
        prev = append_context_aggregation(&mut g, prev, agg, "ctx")?;
    }

    // Coarse-to-fine refinement against the configured taps.
    if cfg.use_refinement {
        for (i, (&tap_si, &out_w)) in
            cfg.refinement_taps.iter().zip(&cfg.refinement_widths).enumerate()
        {
            let step = RefinementStep::init(
                &format!("ref{i}"),
                width,
                cfg.stages[tap_si].width,
                out_w,
                cfg.refinement_correction,
                seed,
            )?;
            let tap = taps[tap_si];
            prev = append_refinement(&mut g, prev, tap, step, tap, &format!("ref{i}"))?;
            width = out_w;
        }
    }

    // Dropout, classifier, and the resize to input resolution.
    if cfg.dropout_rate > 0.0 {
        prev = g.add("head.dropout", Op::Dropout { rate: cfg.dropout_rate }, &[prev])?;
    }
    let cls = ConvParams::he_init(
        "head.cls.w",
        cfg.classes,
        width,
        1,
        1,
        ConvGeom::padded(0),
        seed,
    )?;
    prev = g.add("head.cls", Op::Conv(cls), &[prev])?;
    prev = g.add("head.resize", Op::ResizeLike, &[prev, INPUT])?;
    g.set_output(prev)?;

    Ok(Model { graph: g, config: cfg.clone() })
}

/// Evaluation-mode prediction: per-pixel class probabilities and their
/// argmax (ties to the lowest class index).
pub fn predict(model: &mut Model, batch: &Tensor) -> Result<(Tensor, Vec<LabelMap>)> {
    let logits = model.forward(batch, Mode::Eval)?;
    let probs = softmax_channels(&logits)?;
    let maps = argmax_channels(&probs)?;
    Ok((probs, maps))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// On-disk layout: `manifest.json` plus one tensor blob per state tensor
/// (parameters and batch-norm running statistics, in declaration order)
/// and optionally one per optimizer velocity.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    epoch: usize,
    loss_history: Vec<f64>,
    seed: u64,
    state_tensors: Vec<String>,
    velocity_count: Option<usize>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    /// Optimizer velocities, when the checkpoint was saved mid-training.
    pub optimizer: Option<SgdState>,
}

/// Writes `model` (and optionally the optimizer state) into `dir`,
/// creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    epoch: usize,
    loss_history: &[f64],
    seed: u64,
    optimizer: Option<&SgdState>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    let mut write_status: Result<()> = Ok(());
    model.graph.visit_state(&mut |name, t| {
        if write_status.is_err() {
            return;
        }
        names.push(name.to_string());
        write_status = t.write_file(&dir.join(format!("{name}.tsr")));
    });
    write_status?;
    if let Some(state) = optimizer {
        for (i, v) in state.velocities.iter().enumerate() {
            v.write_file(&dir.join(format!("velocity.{i:04}.tsr")))?;
        }
    }
    let manifest = Manifest {
        format_version: 1,
        config: model.config.clone(),
        epoch,
        loss_history: loss_history.to_vec(),
        seed,
        state_tensors: names,
        velocity_count: optimizer.map(|s| s.velocities.len()),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)
        .map_err(|e| Error::io(&dir.join("manifest.json"), e))
}

/// Rebuilds the model from a checkpoint directory; forward outputs are
/// bit-identical to the saved model's.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join("manifest.json");
    let json =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != 1 {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported checkpoint format version {}", manifest.format_version),
        ));
    }
    let mut model = build_model(&manifest.config, manifest.seed)?;

    // The freshly built model must declare exactly the tensors the
    // manifest lists, in the same order.
    let mut built_names = Vec::new();
    model.graph.visit_state(&mut |name, _| built_names.push(name.to_string()));
    if built_names != manifest.state_tensors {
        return Err(Error::format(
            &manifest_path,
            "checkpoint tensor list does not match the configured model",
        ));
    }

    let mut load_status: Result<()> = Ok(());
    model.graph.visit_state_mut(&mut |name, t| {
        if load_status.is_err() {
            return;
        }
        let path = dir.join(format!("{name}.tsr"));
        load_status = (|| {
            let loaded = Tensor::read_file(&path)?;
            if loaded.shape() != t.shape() {
                return Err(Error::format(
                    &path,
                    format!("tensor shape {:?} does not match model {:?}", loaded.shape(), t.shape()),
                ));
            }
            *t = loaded;
            Ok(())
        })();
    });
    load_status?;

    let optimizer = match manifest.velocity_count {
        None => None,
        Some(count) => {
            let mut state = SgdState::new(&mut model.graph);
            if state.velocities.len() != count {
                return Err(Error::format(
                    &manifest_path,
                    format!(
                        "checkpoint has {count} velocities but the model has {} parameters",
                        state.velocities.len()
                    ),
                ));
            }
            for (i, v) in state.velocities.iter_mut().enumerate() {
                let path = dir.join(format!("velocity.{i:04}.tsr"));
                let loaded = Tensor::read_file(&path)?;
                if loaded.shape() != v.shape() {
                    return Err(Error::format(
                        &path,
                        format!(
                            "velocity shape {:?} does not match parameter {:?}",
                            loaded.shape(),
                            v.shape()
                        ),
                    ));
                }
                *v = loaded;
            }
            Some(state)
        }
    };

    Ok(LoadedCheckpoint {
        model,
        epoch: manifest.epoch,
        loss_history: manifest.loss_history,
        seed: manifest.seed,
        optimizer,
    })
}
