//! Static layer graph with reverse-mode differentiation.
//!
//! A [`ModelGraph`] is a directed acyclic graph of [`LayerNode`]s built
//! once at model-construction time. Node ids are assigned in insertion
//! order and every edge points from a lower id to a higher one, so forward
//! evaluation is a single left-to-right sweep and backward a single
//! right-to-left sweep. The graph owns all learnable state (convolution
//! and batch-norm parameters live inside their nodes) plus the per-run
//! caches: forward activations, op caches (pool argmax, batch-norm batch
//! statistics, dropout masks) and per-node output gradients. Gradients
//! accumulate additively, so a node feeding several consumers receives the
//! sum of their contributions.

use crate::error::{Error, Result};
use crate::layers::{self, BNParams, ConvParams};
use crate::rng;
use crate::tensor::{elementwise_sum, GradPair, Tensor};

/// Index of a node in its graph.
pub type NodeId = usize;

/// The operation a node applies to its inputs.
#[derive(Debug)]
pub enum Op {
    /// The graph's single entry point; holds the batch fed to `forward`.
    Input,
    /// Convolution with learnable weights and bias.
    Conv(ConvParams),
    /// Element-wise `max(0, x)`.
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool2x2,
    /// Batch normalization with learnable scale/shift and running stats.
    BatchNorm(BNParams),
    /// Inverted dropout; identity in evaluation mode.
    Dropout { rate: f64 },
    /// Element-wise sum of all inputs (two or more).
    Sum,
    /// Bilinear resize of the first input to the spatial size of the
    /// second. The second input contributes only its shape and receives
    /// no gradient through this edge.
    ResizeLike,
}

/// One layer instance: a name (used for parameter and checkpoint keys),
/// the operation, and the ids of its inputs.
#[derive(Debug)]
pub struct LayerNode {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Forward-pass mode.
///
/// Training mode uses batch statistics in batch norm and samples dropout
/// masks from streams keyed by `(seed, node id, sample index)`; evaluation
/// mode uses running statistics and skips dropout entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// Per-node cache written by forward and consumed by backward.
enum Cache {
    None,
    Pool(Vec<usize>),
    Bn(layers::BnCache),
    Mask(Tensor),
}

/// Identifies a learnable tensor during parameter visits.
pub struct ParamMeta {
    /// Stable key, `"{node name}.{w|b|gamma|beta}"`.
    pub name: String,
    /// Whether weight decay applies (convolution weights only; biases and
    /// batch-norm affine parameters are excluded).
    pub decay: bool,
}

/// A layer DAG with its learnable state and run-time caches.
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    output: Option<NodeId>,
    /// Nodes reachable backwards from the output; others are skipped.
    live: Vec<bool>,
    acts: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    grads: Vec<Option<Tensor>>,
    last_mode: Option<Mode>,
}

/// Id of the implicit input node every graph starts with.
pub const INPUT: NodeId = 0;

impl ModelGraph {
    /// An empty graph holding only the input node.
    pub fn new() -> Self {
        ModelGraph {
            nodes: vec![LayerNode { name: "input".into(), op: Op::Input, inputs: vec![] }],
            output: None,
            live: vec![],
            acts: vec![],
            caches: vec![],
            grads: vec![],
            last_mode: None,
        }
    }

    /// Appends a node and returns its id. Inputs must already exist, which
    /// keeps the graph topologically ordered by construction.
    pub fn add(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        for &i in inputs {
            if i >= id {
                return Err(Error::Graph(format!(
                    "node input {i} does not exist yet (adding node {id})"
                )));
            }
        }
        let arity_ok = match op {
            Op::Input => false, // only the implicit node 0 may be an input
            Op::Conv(_) | Op::Relu | Op::MaxPool2x2 | Op::BatchNorm(_) | Op::Dropout { .. } => {
                inputs.len() == 1
            }
            Op::Sum => inputs.len() >= 2,
            Op::ResizeLike => inputs.len() == 2,
        };
        if !arity_ok {
            return Err(Error::Graph(format!(
                "node {:?} given {} inputs",
                op_kind(&op),
                inputs.len()
            )));
        }
        if let Op::Dropout { rate } = op {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
            }
        }
        self.nodes.push(LayerNode { name: name.into(), op, inputs: inputs.to_vec() });
        Ok(id)
    }

    /// Declares which node produces the graph's output and computes the
    /// live set. Must be called before `forward`.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Graph(format!("output node {id} does not exist")));
        }
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if !live[n] {
                live[n] = true;
                stack.extend_from_slice(&self.nodes[n].inputs);
            }
        }
        if !live[INPUT] {
            return Err(Error::Graph("output is not connected to the input".into()));
        }
        self.output = Some(id);
        self.live = live;
        Ok(())
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.output
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Runs the graph on a batch and returns the output activation.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let output = self
            .output
            .ok_or_else(|| Error::Graph("forward before set_output".into()))?;
        batch.dims4()?;
        let n = self.nodes.len();
        self.acts = (0..n).map(|_| None).collect();
        self.caches = (0..n).map(|_| Cache::None).collect();
        self.grads = (0..n).map(|_| None).collect();
        self.last_mode = Some(mode);
        self.acts[INPUT] = Some(batch.clone());

        for id in 1..n {
            if !self.live[id] {
                continue;
            }
            // Split borrows: the node (and its parameters) vs. the caches.
            let (done, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let input_act = |i: usize| -> Result<&Tensor> {
                self.acts[node_input(done.len(), &node.inputs, i)?]
                    .as_ref()
                    .ok_or_else(|| Error::Graph(format!("input of node {id} not computed")))
            };
            let (out, cache) = match &mut node.op {
                Op::Input => unreachable!("only node 0 is an input"),
                Op::Conv(p) => (p.forward(input_act(0)?)?, Cache::None),
                Op::Relu => (layers::relu(input_act(0)?), Cache::None),
                Op::MaxPool2x2 => {
                    let (y, idx) = layers::maxpool2x2(input_act(0)?)?;
                    (y, Cache::Pool(idx))
                }
                Op::BatchNorm(p) => match mode {
                    Mode::Train { .. } => {
                        let (y, cache) = layers::batchnorm_train(
                            input_act(0)?,
                            &p.gamma.value,
                            &p.beta.value,
                            p.epsilon,
                        )?;
                        // Fold this batch into the running averages.
                        let mom = p.momentum;
                        for (r, &b) in
                            p.running_mean.data_mut().iter_mut().zip(&cache.batch_mean)
                        {
                            *r = (1.0 - mom) * *r + mom * b;
                        }
                        for (r, &b) in
                            p.running_var.data_mut().iter_mut().zip(&cache.batch_var)
                        {
                            *r = (1.0 - mom) * *r + mom * b;
                        }
                        (y, Cache::Bn(cache))
                    }
                    Mode::Eval => (
                        layers::batchnorm_eval(
                            input_act(0)?,
                            &p.gamma.value,
                            &p.beta.value,
                            &p.running_mean,
                            &p.running_var,
                            p.epsilon,
                        )?,
                        Cache::None,
                    ),
                },
                Op::Dropout { rate } => match mode {
                    Mode::Train { seed } => {
                        let node_seed = rng::mix(&[seed, id as u64]);
                        let (y, mask) = layers::dropout_train(input_act(0)?, *rate, node_seed)?;
                        (y, Cache::Mask(mask))
                    }
                    Mode::Eval => (input_act(0)?.clone(), Cache::None),
                },
                Op::Sum => {
                    let mut acc = input_act(0)?.clone();
                    for i in 1..node.inputs.len() {
                        acc = elementwise_sum(&acc, input_act(i)?)?;
                    }
                    (acc, Cache::None)
                }
                Op::ResizeLike => {
                    let reference = input_act(1)?;
                    let (_, _, h, w) = reference.dims4()?;
                    (layers::bilinear_resize(input_act(0)?, h, w)?, Cache::None)
                }
            };
            self.acts[id] = Some(out);
            self.caches[id] = cache;
        }
        Ok(self
            .acts[output]
            .as_ref()
            .expect("output node was computed")
            .clone())
    }

    /// Propagates `upstream` (gradient of the objective with respect to
    /// the output) back through the graph, accumulating parameter
    /// gradients in place. Requires a preceding `forward`.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<()> {
        let output = self
            .output
            .ok_or_else(|| Error::Graph("backward before set_output".into()))?;
        let mode = self
            .last_mode
            .ok_or_else(|| Error::Graph("backward before forward".into()))?;
        let out_act = self.acts[output]
            .as_ref()
            .ok_or_else(|| Error::Graph("backward before forward".into()))?;
        if upstream.shape() != out_act.shape() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.shape(),
                out_act.shape()
            )));
        }
        add_grad(&mut self.grads, output, upstream)?;

        for id in (1..self.nodes.len()).rev() {
            if !self.live[id] {
                continue;
            }
            let Some(grad) = self.grads[id].take() else { continue };
            let (done, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let first_input = node_input(done.len(), &node.inputs, 0)?;
            let input_act = |acts: &[Option<Tensor>], i: usize| -> Result<Tensor> {
                Ok(acts[node_input(done.len(), &node.inputs, i).expect("validated")]
                    .as_ref()
                    .ok_or_else(|| Error::Graph(format!("input of node {id} not computed")))?
                    .clone())
            };
            match &mut node.op {
                Op::Input => unreachable!("only node 0 is an input"),
                Op::Conv(p) => {
                    let x = input_act(&self.acts, 0)?;
                    let gx = p.backward(&x, &grad)?;
                    add_grad(&mut self.grads, first_input, &gx)?;
                }
                Op::Relu => {
                    let x = input_act(&self.acts, 0)?;
                    let gx = layers::relu_backward(&x, &grad)?;
                    add_grad(&mut self.grads, first_input, &gx)?;
                }
                Op::MaxPool2x2 => {
                    let x = input_act(&self.acts, 0)?;
                    let Cache::Pool(idx) = &self.caches[id] else {
                        return Err(Error::Graph("missing pool cache".into()));
                    };
                    let gx = layers::maxpool2x2_backward(x.shape(), idx, &grad)?;
                    add_grad(&mut self.grads, first_input, &gx)?;
                }
                Op::BatchNorm(p) => {
                    let grads = match (&self.caches[id], mode) {
                        (Cache::Bn(cache), Mode::Train { .. }) => {
                            layers::batchnorm_backward_train(cache, &p.gamma.value, &grad)?
                        }
                        (_, Mode::Eval) => {
                            let x = self.acts
                                [node_input(done.len(), &node.inputs, 0).expect("validated")]
                            .as_ref()
                            .ok_or_else(|| Error::Graph("missing batchnorm input".into()))?;
                            layers::batchnorm_backward_eval(
                                x,
                                &p.gamma.value,
                                &p.running_mean,
                                &p.running_var,
                                p.epsilon,
                                &grad,
                            )?
                        }
                        _ => return Err(Error::Graph("missing batchnorm cache".into())),
                    };
                    p.gamma.accumulate(&grads.gamma)?;
                    p.beta.accumulate(&grads.beta)?;
                    add_grad(&mut self.grads, first_input, &grads.input)?;
                }
                Op::Dropout { .. } => match mode {
                    Mode::Train { .. } => {
                        let Cache::Mask(mask) = &self.caches[id] else {
                            return Err(Error::Graph("missing dropout mask".into()));
                        };
                        let gx = layers::dropout_backward(mask, &grad)?;
                        add_grad(&mut self.grads, first_input, &gx)?;
                    }
                    Mode::Eval => add_grad(&mut self.grads, first_input, &grad)?,
                },
                Op::Sum => {
                    for i in 0..node.inputs.len() {
                        let target = node_input(done.len(), &node.inputs, i)?;
                        add_grad(&mut self.grads, target, &grad)?;
                    }
                }
                Op::ResizeLike => {
                    // The reference input only supplies a shape; no
                    // gradient flows to it.
                    let x = input_act(&self.acts, 0)?;
                    let (_, _, h, w) = x.dims4()?;
                    let gx = layers::bilinear_resize_backward(h, w, &grad)?;
                    add_grad(&mut self.grads, first_input, &gx)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient of the objective with respect to the batch fed to the last
    /// `forward`, if `backward` has run.
    pub fn input_grad(&self) -> Option<&Tensor> {
        self.grads.get(INPUT).and_then(|g| g.as_ref())
    }

    /// Activation of a node from the last `forward` (for inspection).
    pub fn activation(&self, id: NodeId) -> Option<&Tensor> {
        self.acts.get(id).and_then(|a| a.as_ref())
    }

    /// Visits every learnable parameter in declaration order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamMeta, &mut GradPair)) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(p) => {
                    f(ParamMeta { name: format!("{}.w", node.name), decay: true }, &mut p.weights);
                    f(ParamMeta { name: format!("{}.b", node.name), decay: false }, &mut p.bias);
                }
                Op::BatchNorm(p) => {
                    f(
                        ParamMeta { name: format!("{}.gamma", node.name), decay: false },
                        &mut p.gamma,
                    );
                    f(
                        ParamMeta { name: format!("{}.beta", node.name), decay: false },
                        &mut p.beta,
                    );
                }
                _ => {}
            }
        }
    }

    /// Visits every persistent tensor — learnable parameters plus
    /// batch-norm running statistics — in declaration order. This is the
    /// checkpoint blob order.
    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for node in &self.nodes {
            match &node.op {
                Op::Conv(p) => {
                    f(&format!("{}.w", node.name), &p.weights.value);
                    f(&format!("{}.b", node.name), &p.bias.value);
                }
                Op::BatchNorm(p) => {
                    f(&format!("{}.gamma", node.name), &p.gamma.value);
                    f(&format!("{}.beta", node.name), &p.beta.value);
                    f(&format!("{}.running_mean", node.name), &p.running_mean);
                    f(&format!("{}.running_var", node.name), &p.running_var);
                }
                _ => {}
            }
        }
    }

    /// Mutable variant of [`ModelGraph::visit_state`], used when loading
    /// checkpoints.
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(p) => {
                    f(&format!("{}.w", node.name), &mut p.weights.value);
                    f(&format!("{}.b", node.name), &mut p.bias.value);
                }
                Op::BatchNorm(p) => {
                    f(&format!("{}.gamma", node.name), &mut p.gamma.value);
                    f(&format!("{}.beta", node.name), &mut p.beta.value);
                    f(&format!("{}.running_mean", node.name), &mut p.running_mean);
                    f(&format!("{}.running_var", node.name), &mut p.running_var);
                }
                _ => {}
            }
        }
    }

    /// Zeroes every parameter's accumulated gradient.
    pub fn zero_param_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Total number of learnable scalars.
    pub fn param_scalar_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(&mut |_, p| n += p.value.len());
        n
    }
}

impl Default for ModelGraph {
    fn default() -> Self {
        Self::new()
    }
}

fn node_input(id: usize, inputs: &[NodeId], i: usize) -> Result<NodeId> {
    let v = *inputs
        .get(i)
        .ok_or_else(|| Error::Graph(format!("node {id} missing input {i}")))?;
    debug_assert!(v < id);
    Ok(v)
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match accumulator {:?} at node {id}",
                    g.shape(),
                    acc.shape()
                )));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot => *slot = Some(g.clone()),
    }
    Ok(())
}

fn op_kind(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Conv(_) => "conv",
        Op::Relu => "relu",
        Op::MaxPool2x2 => "maxpool",
        Op::BatchNorm(_) => "batchnorm",
        Op::Dropout { .. } => "dropout",
        Op::Sum => "sum",
        Op::ResizeLike => "resize",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ConvGeom;

    fn conv_node(name: &str, out_ch: usize, in_ch: usize, k: usize, seed: u64) -> ConvParams {
        ConvParams::he_init(&format!("{name}.w"), out_ch, in_ch, k, k, ConvGeom::padded(k / 2), seed)
            .unwrap()
    }

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::stream(&[seed]);
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn graph_forward_matches_functional_composition() {
        let conv = conv_node("c", 4, 2, 3, 9);
        let functional = {
            let x = rand_batch(&[1, 2, 6, 6], 1);
            let y = conv.forward(&x).unwrap();
            crate::layers::relu(&y)
        };

        let mut g = ModelGraph::new();
        let c = g.add("c", Op::Conv(conv_node("c", 4, 2, 3, 9)), &[INPUT]).unwrap();
        let r = g.add("r", Op::Relu, &[c]).unwrap();
        g.set_output(r).unwrap();
        let x = rand_batch(&[1, 2, 6, 6], 1);
        let graphed = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(functional.data(), graphed.data());
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x + x doubles every element, so dL/dx = 2 * upstream.
        let mut g = ModelGraph::new();
        let s = g.add("twice", Op::Sum, &[INPUT, INPUT]).unwrap();
        g.set_output(s).unwrap();
        let x = rand_batch(&[1, 1, 2, 2], 3);
        let y = g.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        let up = Tensor::new(&[1, 1, 2, 2], 1.0).unwrap();
        g.backward(&up).unwrap();
        assert_eq!(g.input_grad().unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn resize_reference_gets_no_gradient() {
        // out = resize(relu(x), like x): same spatial size, so the value
        // path is an identity over positives; the reference edge must not
        // add anything.
        let mut g = ModelGraph::new();
        let r = g.add("r", Op::Relu, &[INPUT]).unwrap();
        let z = g.add("z", Op::ResizeLike, &[r, INPUT]).unwrap();
        g.set_output(z).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        g.forward(&x, Mode::Eval).unwrap();
        g.backward(&Tensor::new(&[1, 1, 1, 4], 1.0).unwrap()).unwrap();
        assert_eq!(g.input_grad().unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = ModelGraph::new();
        let r = g.add("r", Op::Relu, &[INPUT]).unwrap();
        g.set_output(r).unwrap();
        let up = Tensor::new(&[1, 1, 1, 1], 1.0).unwrap();
        assert!(matches!(g.backward(&up), Err(Error::Graph(_))));
    }

    #[test]
    fn construction_is_validated() {
        let mut g = ModelGraph::new();
        assert!(g.add("bad", Op::Relu, &[5]).is_err());
        assert!(g.add("bad", Op::Sum, &[INPUT]).is_err());
        assert!(g.add("bad", Op::Dropout { rate: 1.0 }, &[INPUT]).is_err());
        let r = g.add("r", Op::Relu, &[INPUT]).unwrap();
        assert!(g.set_output(99).is_err());
        g.set_output(r).unwrap();
    }

    #[test]
    fn dropout_trains_stochastically_and_evals_as_identity() {
        let mut g = ModelGraph::new();
        let d = g.add("d", Op::Dropout { rate: 0.5 }, &[INPUT]).unwrap();
        g.set_output(d).unwrap();
        let x = Tensor::new(&[1, 1, 8, 8], 1.0).unwrap();
        let eval = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(eval.data(), x.data());
        let t1 = g.forward(&x, Mode::Train { seed: 1 }).unwrap();
        let t1b = g.forward(&x, Mode::Train { seed: 1 }).unwrap();
        let t2 = g.forward(&x, Mode::Train { seed: 2 }).unwrap();
        assert_eq!(t1.data(), t1b.data());
        assert_ne!(t1.data(), t2.data());
    }

    #[test]
    fn running_stats_update_only_in_training() {
        let mut g = ModelGraph::new();
        let bn = g
            .add("bn", Op::BatchNorm(BNParams::new(1, 1e-5, 0.1).unwrap()), &[INPUT])
            .unwrap();
        g.set_output(bn).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        g.forward(&x, Mode::Eval).unwrap();
        let Op::BatchNorm(p) = &g.node(1).op else { unreachable!() };
        assert_eq!(p.running_mean.data(), &[0.0]);

        g.forward(&x, Mode::Train { seed: 0 }).unwrap();
        let Op::BatchNorm(p) = &g.node(1).op else { unreachable!() };
        // EMA after one batch: 0.9 * 0 + 0.1 * batch value.
        assert!((p.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn state_visit_order_is_stable() {
        let mut g = ModelGraph::new();
        let c = g.add("c", Op::Conv(conv_node("c", 2, 1, 3, 7)), &[INPUT]).unwrap();
        let bn = g
            .add("bn", Op::BatchNorm(BNParams::new(2, 1e-5, 0.1).unwrap()), &[c])
            .unwrap();
        g.set_output(bn).unwrap();
        let mut names = Vec::new();
        g.visit_state(&mut |name, _| names.push(name.to_string()));
        assert_eq!(
            names,
            ["c.w", "c.b", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"]
        );
        let mut decays = Vec::new();
        g.visit_params_mut(&mut |meta, _| decays.push((meta.name, meta.decay)));
        assert_eq!(decays[0], ("c.w".to_string(), true));
        assert!(!decays[1].1 && !decays[2].1 && !decays[3].1);
    }
}
