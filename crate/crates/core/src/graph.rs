//! Architecture graphs: typed layer nodes in topological order, their
//! parameters, shape inference and execution on a [`Tape`].

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::{output_extent, ConvSpec};
use crate::ops::norm::NormMode;
use crate::ops::pointwise::Activation;
use crate::ops::pool::{PoolKind, PoolSpec};
use crate::tensor::{Real, Tensor};

/// Std of the truncated-normal initializer for conv and linear weights.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input {
        channels: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    LayerNorm {
        channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Activation {
        kind: Activation,
    },
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Concat,
    Add,
    ChannelRescale {
        channels: usize,
    },
    DropPath {
        rate: f64,
    },
}

impl NodeKind {
    pub fn op_name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::LayerNorm { .. } => "layer_norm",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::Activation { .. } => "activation",
            NodeKind::Pool { .. } => "pool",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Flatten => "flatten",
            NodeKind::Linear { .. } => "linear",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::ChannelRescale { .. } => "channel_rescale",
            NodeKind::DropPath { .. } => "drop_path",
        }
    }

    /// Names and shapes of the learnable tensors of this node.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            NodeKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let mut v = vec![(
                    "weight",
                    vec![out_channels, in_channels / groups, kernel, kernel],
                )];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            NodeKind::LayerNorm { channels } | NodeKind::BatchNorm { channels } => {
                vec![("weight", vec![channels]), ("bias", vec![channels])]
            }
            NodeKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![in_features, out_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            NodeKind::ChannelRescale { channels } => vec![
                ("gamma", vec![channels]),
                ("se_weight", vec![channels, channels]),
                ("se_bias", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
}

/// Structural summary of one stage, kept alongside the node list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub index: usize,
    pub growth_rate: usize,
    pub blocks: usize,
    pub er: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial reduction applied on entry to the stage (1 for the first stage).
    pub entry_stride: usize,
    /// Stride-1 transitions inside the stage.
    pub transitions: usize,
    /// Channel width after every block and transition, in order.
    pub channel_trace: Vec<usize>,
    /// Node whose output is the stage output.
    pub output_node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionInfo {
    pub interval: usize,
    pub ratio: f64,
    pub rounding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemInfo {
    pub kind: String,
    pub patch: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub classes: usize,
    pub features: usize,
}

/// Description fields beyond the node list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<StemInfo>,
    #[serde(default)]
    pub stages: Vec<StageInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadInfo>,
    /// The configuration the graph was built from, for auditing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// A directed acyclic graph of layer nodes. Nodes are stored in a topological
/// order: every input index is smaller than the consuming node's index.
/// Node 0 is the single input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGraph {
    pub nodes: Vec<Node>,
    pub output: usize,
    pub meta: ArchMeta,
}

impl ModuleGraph {
    pub fn input_channels(&self) -> usize {
        match self.nodes[0].kind {
            NodeKind::Input { channels } => channels,
            _ => unreachable!("validated graphs start with an input node"),
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Resolves layer names to node indices, listing valid names on failure.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.find(name).ok_or_else(|| Error::UnknownLayer {
                    name: name.clone(),
                    available: self.node_names().join(", "),
                })
            })
            .collect()
    }

    /// Checks topological order, arities and channel agreement.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || !matches!(self.nodes[0].kind, NodeKind::Input { .. }) {
            return Err(Error::Architecture("graph must start with an input node".into()));
        }
        let mut channels: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Architecture(format!(
                    "node {i} ({}) consumes node {bad}, which is not earlier in the order",
                    node.name
                )));
            }
            if i > 0 && matches!(node.kind, NodeKind::Input { .. }) {
                return Err(Error::Architecture(format!(
                    "node {i} ({}) is a second input",
                    node.name
                )));
            }
            let ins: Vec<usize> = node.inputs.iter().map(|&j| channels[j]).collect();
            channels.push(out_channels(&node.name, &node.kind, &ins)?);
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Architecture(format!("output index {} out of range", self.output)));
        }
        Ok(())
    }

    /// Per-node output channel count.
    pub fn channels(&self) -> Vec<usize> {
        let mut channels: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<usize> = node.inputs.iter().map(|&j| channels[j]).collect();
            channels.push(out_channels(&node.name, &node.kind, &ins).expect("validated graph"));
        }
        channels
    }

    /// Output shape of every node for an N×C×H×W input.
    pub fn infer_shapes(&self, input: [usize; 4]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&j| &shapes[j]).collect();
            shapes.push(out_shape(node, &ins, input)?);
        }
        Ok(shapes)
    }

    /// For each node, the index of the last node that reads it (itself if none).
    pub fn last_uses(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last[j] = last[j].max(i);
            }
        }
        last
    }

    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.kind.param_count()).sum()
    }
}

fn out_channels(name: &str, kind: &NodeKind, ins: &[usize]) -> Result<usize> {
    let arity = |n: usize| -> Result<()> {
        if ins.len() != n {
            return Err(Error::Architecture(format!(
                "{name}: {} expects {n} input(s), got {}",
                kind.op_name(),
                ins.len()
            )));
        }
        Ok(())
    };
    let expect = |want: usize| -> Result<()> {
        if ins[0] != want {
            return Err(Error::Architecture(format!(
                "{name}: {} expects {want} channels, input has {}",
                kind.op_name(),
                ins[0]
            )));
        }
        Ok(())
    };
    match *kind {
        NodeKind::Input { channels } => {
            arity(0)?;
            Ok(channels)
        }
        NodeKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } => {
            arity(1)?;
            expect(in_channels)?;
            if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(Error::Architecture(format!(
                    "{name}: groups={groups} must divide Cin={in_channels} and Cout={out_channels}"
                )));
            }
            if kernel == 0 || stride == 0 || out_channels == 0 {
                return Err(Error::Architecture(format!("{name}: degenerate convolution")));
            }
            Ok(out_channels)
        }
        NodeKind::LayerNorm { channels }
        | NodeKind::BatchNorm { channels }
        | NodeKind::ChannelRescale { channels } => {
            arity(1)?;
            expect(channels)?;
            Ok(channels)
        }
        NodeKind::Linear {
            in_features,
            out_features,
            ..
        } => {
            arity(1)?;
            expect(in_features)?;
            Ok(out_features)
        }
        NodeKind::Activation { .. }
        | NodeKind::Pool { .. }
        | NodeKind::GlobalAvgPool
        | NodeKind::Flatten => {
            arity(1)?;
            Ok(ins[0])
        }
        NodeKind::DropPath { rate } => {
            arity(1)?;
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Architecture(format!(
                    "{name}: drop rate {rate} outside [0, 1)"
                )));
            }
            Ok(ins[0])
        }
        NodeKind::Concat => {
            if ins.is_empty() {
                return Err(Error::Architecture(format!("{name}: concat without inputs")));
            }
            Ok(ins.iter().sum())
        }
        NodeKind::Add => {
            arity(2)?;
            if ins[0] != ins[1] {
                return Err(Error::Architecture(format!(
                    "{name}: add of {} and {} channels",
                    ins[0], ins[1]
                )));
            }
            Ok(ins[0])
        }
    }
}

fn out_shape(node: &Node, ins: &[&Vec<usize>], input: [usize; 4]) -> Result<Vec<usize>> {
    let name = &node.name;
    let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
        match s[..] {
            [n, _, h, w] => Ok((n, h, w)),
            _ => Err(Error::shape(
                "shape inference",
                format!("{name}: expected a spatial input, got {s:?}"),
            )),
        }
    };
    Ok(match node.kind {
        NodeKind::Input { channels } => {
            if input[1] != channels {
                return Err(Error::shape(
                    "shape inference",
                    format!("input has {} channels, graph expects {channels}", input[1]),
                ));
            }
            input.to_vec()
        }
        NodeKind::Conv2d {
            out_channels,
            kernel,
            stride,
            pad,
            ..
        } => {
            let (n, h, w) = spatial(ins[0])?;
            if kernel == stride && pad == 0 && (h % stride != 0 || w % stride != 0) {
                return Err(Error::shape(
                    "shape inference",
                    format!("{name}: {h}×{w} input not divisible by patch size {stride}"),
                ));
            }
            let oh = output_extent(h, kernel, stride, pad);
            let ow = output_extent(w, kernel, stride, pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) => vec![n, out_channels, oh, ow],
                _ => {
                    return Err(Error::shape(
                        "shape inference",
                        format!("{name}: kernel {kernel} exceeds padded {h}×{w} input"),
                    ))
                }
            }
        }
        NodeKind::Pool {
            kernel, stride, pad, ..
        } => {
            let (n, h, w) = spatial(ins[0])?;
            match (
                output_extent(h, kernel, stride, pad),
                output_extent(w, kernel, stride, pad),
            ) {
                (Some(oh), Some(ow)) => vec![n, ins[0][1], oh, ow],
                _ => {
                    return Err(Error::shape(
                        "shape inference",
                        format!("{name}: pool window {kernel} exceeds {h}×{w} input"),
                    ))
                }
            }
        }
        NodeKind::GlobalAvgPool => {
            let (n, _, _) = spatial(ins[0])?;
            vec![n, ins[0][1], 1, 1]
        }
        NodeKind::Flatten => vec![ins[0][0], ins[0][1..].iter().product()],
        NodeKind::Linear { out_features, .. } => {
            if ins[0].len() != 2 {
                return Err(Error::shape(
                    "shape inference",
                    format!("{name}: linear needs a flattened input, got {:?}", ins[0]),
                ));
            }
            vec![ins[0][0], out_features]
        }
        NodeKind::Concat => {
            let (n, h, w) = spatial(ins[0])?;
            for s in ins {
                if spatial(s)? != (n, h, w) {
                    return Err(Error::shape(
                        "shape inference",
                        format!("{name}: concat inputs disagree on N×H×W"),
                    ));
                }
            }
            vec![n, ins.iter().map(|s| s[1]).sum(), h, w]
        }
        NodeKind::Add => {
            if ins[0] != ins[1] {
                return Err(Error::shape(
                    "shape inference",
                    format!("{name}: add of {:?} and {:?}", ins[0], ins[1]),
                ));
            }
            ins[0].clone()
        }
        NodeKind::LayerNorm { .. }
        | NodeKind::BatchNorm { .. }
        | NodeKind::Activation { .. }
        | NodeKind::ChannelRescale { .. }
        | NodeKind::DropPath { .. } => ins[0].clone(),
    })
}

/// Appends nodes while tracking channel counts, so fragments can be chained.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        let mut b = GraphBuilder::default();
        b.nodes.push(Node {
            name: "input".to_string(),
            kind: NodeKind::Input {
                channels: input_channels,
            },
            inputs: Vec::new(),
        });
        b.channels.push(input_channels);
        b
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, id: usize) -> usize {
        self.channels[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[usize]) -> Result<usize> {
        let name = name.into();
        let ins: Vec<usize> = inputs.iter().map(|&i| self.channels[i]).collect();
        let c = out_channels(&name, &kind, &ins)?;
        self.nodes.push(Node {
            name,
            kind,
            inputs: inputs.to_vec(),
        });
        self.channels.push(c);
        Ok(self.nodes.len() - 1)
    }

    pub fn conv(
        &mut self,
        name: impl Into<String>,
        x: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<usize> {
        let in_channels = self.channels[x];
        self.push(
            name,
            NodeKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                groups,
                bias,
            },
            &[x],
        )
    }

    pub fn layer_norm(&mut self, name: impl Into<String>, x: usize) -> Result<usize> {
        let channels = self.channels[x];
        self.push(name, NodeKind::LayerNorm { channels }, &[x])
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, x: usize) -> Result<usize> {
        let channels = self.channels[x];
        self.push(name, NodeKind::BatchNorm { channels }, &[x])
    }

    pub fn activation(&mut self, name: impl Into<String>, x: usize, kind: Activation) -> Result<usize> {
        self.push(name, NodeKind::Activation { kind }, &[x])
    }

    pub fn finish(self, output: usize, meta: ArchMeta) -> Result<ModuleGraph> {
        let g = ModuleGraph {
            nodes: self.nodes,
            output,
            meta,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Running statistics of one batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Learnable tensors of a graph, indexed by node then by parameter slot.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    pub tensors: Vec<Vec<Arc<Tensor<T>>>>,
    pub running: Vec<Option<RunningStats<T>>>,
}

impl<T: Real> ParamStore<T> {
    /// Truncated-normal(0.02) conv/linear weights, zero biases, unit/zero
    /// norm affines, unit re-scaling gamma.
    pub fn init(graph: &ModuleGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(graph.nodes.len());
        let mut running = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let mut slots = Vec::new();
            for (name, shape) in node.kind.param_shapes() {
                let t = match (&node.kind, name) {
                    (NodeKind::Conv2d { .. } | NodeKind::Linear { .. }, "weight")
                    | (NodeKind::ChannelRescale { .. }, "se_weight") => {
                        Tensor::trunc_normal(&shape, INIT_STD, &mut rng)
                    }
                    (NodeKind::LayerNorm { .. } | NodeKind::BatchNorm { .. }, "weight")
                    | (NodeKind::ChannelRescale { .. }, "gamma") => Tensor::ones(&shape),
                    _ => Tensor::zeros(&shape),
                };
                slots.push(Arc::new(t));
            }
            tensors.push(slots);
            running.push(match node.kind {
                NodeKind::BatchNorm { channels } => Some(RunningStats {
                    mean: vec![T::zero(); channels],
                    var: vec![T::one(); channels],
                }),
                _ => None,
            });
        }
        ParamStore { tensors, running }
    }

    /// `(qualified name, tensor)` for every learnable tensor, in node order.
    pub fn named<'a>(&'a self, graph: &'a ModuleGraph) -> Vec<(String, &'a Arc<Tensor<T>>)> {
        let mut out = Vec::new();
        for (node, slots) in graph.nodes.iter().zip(&self.tensors) {
            for ((pname, _), t) in node.kind.param_shapes().iter().zip(slots) {
                out.push((format!("{}.{pname}", node.name), t));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|slots| slots.iter().map(|t| Arc::new(t.cast::<U>())).collect())
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
                        var: r.var.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of running a graph on a tape.
pub struct ForwardPass {
    pub output: Var,
    /// Tape handles of every learnable tensor, aligned with `ParamStore::tensors`.
    pub params: Vec<Vec<Var>>,
    /// Captured node outputs, in the order requested.
    pub captured: Vec<Var>,
}

/// Runs `graph` on `input`, recording onto `tape`.
///
/// Train mode uses batch statistics (and updates running estimates) and
/// draws drop-path masks from `rng`; eval mode never touches `rng`. On an
/// inference tape, intermediate values are released once their last
/// consumer has run.
pub fn forward<T: Real>(
    graph: &ModuleGraph,
    params: &mut ParamStore<T>,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
    capture: &[usize],
) -> Result<ForwardPass> {
    let bound: Vec<Vec<Var>> = params
        .tensors
        .iter()
        .map(|slots| slots.iter().map(|t| tape.param(t.clone())).collect())
        .collect();
    forward_bound(graph, &mut params.running, tape, input, bound, mode, rng, capture)
}

/// Like [`forward`], with learnable tensors already on the tape as `bound`.
#[allow(clippy::too_many_arguments)]
pub fn forward_bound<T: Real>(
    graph: &ModuleGraph,
    running: &mut [Option<RunningStats<T>>],
    tape: &mut Tape<T>,
    input: Var,
    bound: Vec<Vec<Var>>,
    mode: Mode,
    mut rng: Option<&mut dyn RngCore>,
    capture: &[usize],
) -> Result<ForwardPass> {
    let n_nodes = graph.nodes.len();
    let last = graph.last_uses();
    // Pass-through nodes hand their input's tape value on unchanged; a value
    // may only be released once every node aliasing it is past its last use.
    let mut owner: Vec<usize> = (0..n_nodes).collect();
    for (i, node) in graph.nodes.iter().enumerate() {
        let passthrough = matches!(node.kind, NodeKind::DropPath { rate } if mode == Mode::Eval || rate == 0.0);
        if passthrough {
            owner[i] = owner[node.inputs[0]];
        }
    }
    let mut owner_last = vec![0usize; n_nodes];
    let mut keep = vec![false; n_nodes];
    for i in 0..n_nodes {
        owner_last[owner[i]] = owner_last[owner[i]].max(last[i]);
    }
    keep[owner[graph.output]] = true;
    for &c in capture {
        keep[owner[c]] = true;
    }
    let mut vals: Vec<Option<Var>> = vec![None; n_nodes];
    let norm_mode = match mode {
        Mode::Train => NormMode::Train,
        Mode::Eval => NormMode::Eval,
    };
    for (i, node) in graph.nodes.iter().enumerate() {
        let pv = &bound[i];
        let x = |k: usize| vals[node.inputs[k]].expect("input computed");
        let out = match node.kind {
            NodeKind::Input { .. } => input,
            NodeKind::Conv2d {
                stride, pad, groups, bias, ..
            } => tape.conv2d(
                x(0),
                pv[0],
                bias.then(|| pv[1]),
                ConvSpec::new(stride, pad, groups),
            )?,
            NodeKind::LayerNorm { .. } => tape.layer_norm(x(0), pv[0], pv[1], LN_EPS)?,
            NodeKind::BatchNorm { .. } => {
                let stats = running[i].as_ref().expect("batch norm buffers");
                let (y, batch) =
                    tape.batch_norm(x(0), pv[0], pv[1], &stats.mean, &stats.var, BN_EPS, norm_mode)?;
                if let Some(batch) = batch {
                    let m = T::from_f64_lossy(BN_MOMENTUM);
                    let stats = running[i].as_mut().expect("batch norm buffers");
                    for (r, b) in stats.mean.iter_mut().zip(&batch.mean) {
                        *r = (T::one() - m) * *r + m * *b;
                    }
                    for (r, b) in stats.var.iter_mut().zip(&batch.var_unbiased) {
                        *r = (T::one() - m) * *r + m * *b;
                    }
                }
                y
            }
            NodeKind::Activation { kind } => tape.activation(x(0), kind),
            NodeKind::Pool {
                kind,
                kernel,
                stride,
                pad,
            } => tape.pool(
                x(0),
                PoolSpec {
                    kind,
                    kernel,
                    stride,
                    pad,
                },
            )?,
            NodeKind::GlobalAvgPool => tape.global_avg_pool(x(0))?,
            NodeKind::Flatten => {
                let s = tape.shape(x(0)).to_vec();
                tape.reshape(x(0), vec![s[0], s[1..].iter().product()])?
            }
            NodeKind::Linear { bias, .. } => tape.linear(x(0), pv[0], bias.then(|| pv[1]))?,
            NodeKind::Concat => {
                let ins: Vec<Var> = (0..node.inputs.len()).map(x).collect();
                tape.concat_channels(&ins)?
            }
            NodeKind::Add => tape.add(x(0), x(1))?,
            NodeKind::ChannelRescale { .. } => tape.channel_rescale(x(0), pv[0], pv[1], pv[2])?,
            NodeKind::DropPath { rate } => match mode {
                Mode::Eval => x(0),
                Mode::Train if rate == 0.0 => x(0),
                Mode::Train => {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{}: drop path in train mode needs an rng",
                            node.name
                        ))
                    })?;
                    let n = tape.shape(x(0))[0];
                    let factors = drop_path_factors::<T>(n, rate, rng);
                    tape.scale_samples(x(0), factors)?
                }
            },
        };
        vals[i] = Some(out);
        if !tape.is_recording() {
            for &v in &bound[i] {
                tape.release(v);
            }
            for &j in &node.inputs {
                let o = owner[j];
                if owner_last[o] == i && !keep[o] && owner[i] != o {
                    tape.release(vals[o].expect("computed"));
                }
            }
        }
    }
    Ok(ForwardPass {
        output: vals[graph.output].expect("output computed"),
        params: bound,
        captured: capture.iter().map(|&c| vals[c].expect("captured")).collect(),
    })
}

/// Per-sample drop-path multipliers: 0 with probability `rate`, else 1/(1 − rate).
pub fn drop_path_factors<T: Real>(n: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                scale
            }
        })
        .collect()
}

/// Convenience: eval-mode inference without gradients.
pub fn infer<T: Real>(
    graph: &ModuleGraph,
    params: &mut ParamStore<T>,
    input: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input);
    let pass = forward(graph, params, &mut tape, x, Mode::Eval, None, &[])?;
    Ok(tape.value(pass.output).clone())
}
