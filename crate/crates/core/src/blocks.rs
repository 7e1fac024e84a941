//! The three composites the segmentation network is built from.
//!
//! *Residual correction* wraps a small conv stack `H` around an identity
//! skip: `out = f + H(f)` with `H = 1x1 conv -> ReLU -> 3x3 conv -> ReLU
//! -> 1x1 conv`. The final 1x1 convolution initializes to zero, so a
//! fresh block is exactly the identity and training only learns the
//! correction term. There is no activation after the sum.
//!
//! *Context aggregation* runs several dilated 3x3 branches over the
//! encoder output, dilation rates strictly decreasing (coarsest context
//! first), and fuses them either sequentially — `A_1 = Y[T1 + T2]`,
//! `A_i = Y[A_{i-1} + T_{i+1}]` with `Y` a residual correction — or as a
//! single corrected sum of all branches (the parallel-stack baseline).
//! The sequential cascade lets each fusion inherit everything already
//! aggregated; the parallel form is kept for ablation comparisons.
//!
//! *Refinement* fuses the running coarse semantic stream `m` with a
//! shallow encoder tap `f`: both pass through a 1x1 projection and ReLU,
//! the projected `m` is bilinearly upsampled to `f`'s resolution, the two
//! are summed, optionally corrected, and finally resized to the next
//! stage's working resolution.

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, NodeId, Op};
use crate::layers::{
    bilinear_resize, relu, ConvGeom, ConvParams,
};
use crate::tensor::{elementwise_sum, Tensor};

/// Serializable choice between the cascade and the parallel baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Sequential pairwise fusion, coarsest dilation first.
    Cascaded,
    /// One corrected sum over all branches.
    ParallelStack,
}

// ---------------------------------------------------------------------------
// Residual correction
// ---------------------------------------------------------------------------

/// Parameters of one residual correction block.
#[derive(Debug, Clone)]
pub struct ResidualCorrection {
    /// 1x1 entry convolution.
    pub conv_a: ConvParams,
    /// 3x3 middle convolution, padding 1.
    pub conv_b: ConvParams,
    /// 1x1 exit convolution; zero at initialization so the block starts
    /// as the identity.
    pub conv_c: ConvParams,
}

impl ResidualCorrection {
    /// A block over `channels` feature maps. `conv_a` and `conv_b` draw
    /// from He-initialized streams keyed by `name`; `conv_c` is zero.
    pub fn init(name: &str, channels: usize, seed: u64) -> Result<Self> {
        Ok(ResidualCorrection {
            conv_a: ConvParams::he_init(
                &format!("{name}.a.w"),
                channels,
                channels,
                1,
                1,
                ConvGeom::padded(0),
                seed,
            )?,
            conv_b: ConvParams::he_init(
                &format!("{name}.b.w"),
                channels,
                channels,
                3,
                3,
                ConvGeom::padded(1),
                seed,
            )?,
            conv_c: ConvParams::zero_init(channels, channels, 1, 1, ConvGeom::padded(0))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv_a.in_channels()
    }
}

/// Functional forward of a residual correction: `f + H(f)`.
pub fn residual_correct(f: &Tensor, block: &ResidualCorrection) -> Result<Tensor> {
    let h = block.conv_a.forward(f)?;
    let h = relu(&h);
    let h = block.conv_b.forward(&h)?;
    let h = relu(&h);
    let h = block.conv_c.forward(&h)?;
    elementwise_sum(f, &h)
}

/// Appends a residual correction to a graph and returns the output node.
/// Consumes the block's parameters; node names derive from `name`.
pub fn append_residual_correction(
    g: &mut ModelGraph,
    input: NodeId,
    block: ResidualCorrection,
    name: &str,
) -> Result<NodeId> {
    let a = g.add(format!("{name}.a"), Op::Conv(block.conv_a), &[input])?;
    let ar = g.add(format!("{name}.a_relu"), Op::Relu, &[a])?;
    let b = g.add(format!("{name}.b"), Op::Conv(block.conv_b), &[ar])?;
    let br = g.add(format!("{name}.b_relu"), Op::Relu, &[b])?;
    let c = g.add(format!("{name}.c"), Op::Conv(block.conv_c), &[br])?;
    g.add(format!("{name}.sum"), Op::Sum, &[input, c])
}

// ---------------------------------------------------------------------------
// Context aggregation
// ---------------------------------------------------------------------------

/// One dilated context branch.
#[derive(Debug, Clone)]
pub struct ContextBranch {
    /// 3x3 convolution with `padding = dilation`, preserving spatial size.
    pub conv: ConvParams,
}

impl ContextBranch {
    pub fn dilation(&self) -> usize {
        self.conv.geom.dilation
    }
}

/// Multi-scale context module: dilated branches plus their fusion
/// corrections.
#[derive(Debug, Clone)]
pub struct ContextAggregator {
    /// Branches in fusion order; dilations strictly decreasing.
    pub branches: Vec<ContextBranch>,
    /// Fusion corrections: empty (corrections disabled), one per fusion
    /// in cascaded mode (`branches - 1`), or exactly one in parallel mode.
    pub corrections: Vec<ResidualCorrection>,
    pub mode: AggregationMode,
}

impl ContextAggregator {
    /// Builds an aggregator over `channels` maps with the given dilation
    /// rates (strictly decreasing, coarsest first).
    pub fn init(
        name: &str,
        channels: usize,
        rates: &[usize],
        mode: AggregationMode,
        with_corrections: bool,
        seed: u64,
    ) -> Result<Self> {
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Ok(ContextBranch {
                    conv: ConvParams::he_init(
                        &format!("{name}.branch{i}.w"),
                        channels,
                        channels,
                        3,
                        3,
                        ConvGeom::dilated(r),
                        seed,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let correction_count = if with_corrections {
            match mode {
                AggregationMode::Cascaded => rates.len().saturating_sub(1),
                AggregationMode::ParallelStack => 1,
            }
        } else {
            0
        };
        let corrections = (0..correction_count)
            .map(|i| ResidualCorrection::init(&format!("{name}.fuse{i}"), channels, seed))
            .collect::<Result<Vec<_>>>()?;
        let agg = ContextAggregator { branches, corrections, mode };
        agg.validate()?;
        Ok(agg)
    }

    /// Checks branch count, strict dilation ordering, channel agreement
    /// and the correction count for the mode.
    pub fn validate(&self) -> Result<()> {
        if self.branches.len() < 2 {
            return Err(Error::Config(format!(
                "context aggregation needs at least 2 branches, got {}",
                self.branches.len()
            )));
        }
        for pair in self.branches.windows(2) {
            let (a, b) = (pair[0].dilation(), pair[1].dilation());
            if a <= b {
                return Err(Error::Config(format!(
                    "context dilations must strictly decrease, got {a} before {b}"
                )));
            }
        }
        if self.branches.iter().any(|b| b.dilation() == 0) {
            return Err(Error::Config("context dilation must be at least 1".into()));
        }
        let ch = self.branches[0].conv.out_channels();
        for b in &self.branches {
            if b.conv.out_channels() != ch || b.conv.in_channels() != ch {
                return Err(Error::Config(
                    "context branches must share one channel width".into(),
                ));
            }
        }
        let expected = match self.mode {
            AggregationMode::Cascaded => self.branches.len() - 1,
            AggregationMode::ParallelStack => 1,
        };
        if !self.corrections.is_empty() && self.corrections.len() != expected {
            return Err(Error::Config(format!(
                "{} fusion corrections for {} branches in {:?} mode (expected {expected} or none)",
                self.corrections.len(),
                self.branches.len(),
                self.mode
            )));
        }
        for c in &self.corrections {
            if c.channels() != ch {
                return Err(Error::Config(
                    "fusion correction width does not match branches".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Functional forward of context aggregation over encoder features `x`.
pub fn aggregate_contexts(x: &Tensor, agg: &ContextAggregator) -> Result<Tensor> {
    agg.validate()?;
    let outs: Vec<Tensor> = agg
        .branches
        .iter()
        .map(|b| b.conv.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let correct = |i: usize, t: &Tensor| -> Result<Tensor> {
        match agg.corrections.get(i) {
            Some(c) => residual_correct(t, c),
            None => Ok(t.clone()),
        }
    };
    match agg.mode {
        AggregationMode::Cascaded => {
            let mut acc = outs[0].clone();
            for (i, t) in outs[1..].iter().enumerate() {
                acc = correct(i, &elementwise_sum(&acc, t)?)?;
            }
            Ok(acc)
        }
        AggregationMode::ParallelStack => {
            let mut acc = outs[0].clone();
            for t in &outs[1..] {
                acc = elementwise_sum(&acc, t)?;
            }
            correct(0, &acc)
        }
    }
}

/// Appends a context aggregator to a graph; returns the fused node.
pub fn append_context_aggregation(
    g: &mut ModelGraph,
    encoder_out: NodeId,
    agg: ContextAggregator,
    name: &str,
) -> Result<NodeId> {
    agg.validate()?;
    let branch_ids = agg
        .branches
        .into_iter()
        .enumerate()
        .map(|(i, b)| g.add(format!("{name}.branch{i}"), Op::Conv(b.conv), &[encoder_out]))
        .collect::<Result<Vec<_>>>()?;
    let mut corrections = agg.corrections.into_iter();
    match agg.mode {
        AggregationMode::Cascaded => {
            let mut acc = branch_ids[0];
            for (i, &t) in branch_ids[1..].iter().enumerate() {
                let sum = g.add(format!("{name}.sum{i}"), Op::Sum, &[acc, t])?;
                acc = match corrections.next() {
                    Some(c) => {
                        append_residual_correction(g, sum, c, &format!("{name}.fuse{i}"))?
                    }
                    None => sum,
                };
            }
            Ok(acc)
        }
        AggregationMode::ParallelStack => {
            let sum = g.add(format!("{name}.sum"), Op::Sum, &branch_ids)?;
            match corrections.next() {
                Some(c) => append_residual_correction(g, sum, c, &format!("{name}.fuse0")),
                None => Ok(sum),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

/// Parameters of one coarse-to-fine refinement step.
#[derive(Debug, Clone)]
pub struct RefinementStep {
    /// 1x1 projection of the coarse semantic stream.
    pub proj_coarse: ConvParams,
    /// 1x1 projection of the shallow encoder tap.
    pub proj_fine: ConvParams,
    /// Correction applied to the fused map, when enabled.
    pub correction: Option<ResidualCorrection>,
}

impl RefinementStep {
    /// Projections from `coarse_ch`/`fine_ch` input widths to a shared
    /// `out_ch` width.
    pub fn init(
        name: &str,
        coarse_ch: usize,
        fine_ch: usize,
        out_ch: usize,
        with_correction: bool,
        seed: u64,
    ) -> Result<Self> {
        Ok(RefinementStep {
            proj_coarse: ConvParams::he_init(
                &format!("{name}.proj_m.w"),
                out_ch,
                coarse_ch,
                1,
                1,
                ConvGeom::padded(0),
                seed,
            )?,
            proj_fine: ConvParams::he_init(
                &format!("{name}.proj_f.w"),
                out_ch,
                fine_ch,
                1,
                1,
                ConvGeom::padded(0),
                seed,
            )?,
            correction: if with_correction {
                Some(ResidualCorrection::init(&format!("{name}.corr"), out_ch, seed)?)
            } else {
                None
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_coarse.out_channels() != self.proj_fine.out_channels() {
            return Err(Error::Config(format!(
                "refinement projections disagree on width: {} vs {}",
                self.proj_coarse.out_channels(),
                self.proj_fine.out_channels()
            )));
        }
        if let Some(c) = &self.correction {
            if c.channels() != self.proj_coarse.out_channels() {
                return Err(Error::Config(
                    "refinement correction width does not match projections".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Functional forward of one refinement step: project both streams, lift
/// the coarse one to the tap's resolution, sum, correct, and resize to
/// `target`.
pub fn refine(
    m: &Tensor,
    f: &Tensor,
    step: &RefinementStep,
    target: (usize, usize),
) -> Result<Tensor> {
    step.validate()?;
    let (_, _, fh, fw) = f.dims4()?;
    let pm = relu(&step.proj_coarse.forward(m)?);
    let pf = relu(&step.proj_fine.forward(f)?);
    let pm_up = bilinear_resize(&pm, fh, fw)?;
    let fused = elementwise_sum(&pm_up, &pf)?;
    let corrected = match &step.correction {
        Some(c) => residual_correct(&fused, c)?,
        None => fused,
    };
    bilinear_resize(&corrected, target.0, target.1)
}

/// Appends a refinement step to a graph. `resize_ref` names the node
/// whose spatial size the output is resized to (the next tap, or the tap
/// itself for the last step).
pub fn append_refinement(
    g: &mut ModelGraph,
    coarse: NodeId,
    tap: NodeId,
    step: RefinementStep,
    resize_ref: NodeId,
    name: &str,
) -> Result<NodeId> {
    step.validate()?;
    let pm = g.add(format!("{name}.proj_m"), Op::Conv(step.proj_coarse), &[coarse])?;
    let pmr = g.add(format!("{name}.proj_m_relu"), Op::Relu, &[pm])?;
    let pf = g.add(format!("{name}.proj_f"), Op::Conv(step.proj_fine), &[tap])?;
    let pfr = g.add(format!("{name}.proj_f_relu"), Op::Relu, &[pf])?;
    let up = g.add(format!("{name}.up"), Op::ResizeLike, &[pmr, tap])?;
    let fused = g.add(format!("{name}.fuse"), Op::Sum, &[up, pfr])?;
    let corrected = match step.correction {
        Some(c) => append_residual_correction(g, fused, c, &format!("{name}.corr"))?,
        None => fused,
    };
    g.add(format!("{name}.out"), Op::ResizeLike, &[corrected, resize_ref])
}
