//! Static cost accounting: parameters, multiply-accumulates and a live-tensor
//! bound on activation memory.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{ModuleGraph, NodeKind};

/// Bytes per activation element (single precision).
pub const ACTIVATION_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema: String,
    pub model: String,
    pub input_shape: [usize; 4],
    pub params: u64,
    pub macs: u64,
    pub peak_activation_bytes: u64,
    pub layers: Vec<LayerCost>,
}

pub const COST_SCHEMA: &str = "densecat.cost/v1";

pub fn count_params(graph: &ModuleGraph) -> u64 {
    graph.param_count()
}

fn node_macs(kind: &NodeKind, in_shape: Option<&Vec<usize>>, out: &[usize]) -> u64 {
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    match *kind {
        NodeKind::Conv2d {
            in_channels,
            kernel,
            groups,
            ..
        } => numel(out) * (in_channels / groups * kernel * kernel) as u64,
        NodeKind::Linear { in_features, .. } => numel(out) * in_features as u64,
        NodeKind::ChannelRescale { channels } => {
            let n = in_shape.map(|s| s[0]).unwrap_or(1);
            (n * channels * channels) as u64
        }
        _ => 0,
    }
}

/// Per-node parameter and MAC rows for an N×C×H×W input.
pub fn breakdown(graph: &ModuleGraph, input_shape: [usize; 4]) -> Result<Vec<LayerCost>> {
    let shapes = graph.infer_shapes(input_shape)?;
    Ok(graph
        .nodes
        .iter()
        .zip(&shapes)
        .map(|(node, out)| LayerCost {
            layer: node.name.clone(),
            kind: node.kind.op_name().to_string(),
            params: node.kind.param_count(),
            macs: node_macs(&node.kind, node.inputs.first().map(|&j| &shapes[j]), out),
            out_shape: out.clone(),
        })
        .collect())
}

/// Conv: N·Cout·H'·W'·(Cin/g)·kh·kw; linear: N·D·K; channel re-scaling: the
/// N·C·C of its excitation matrix; everything else 0.
pub fn count_macs(graph: &ModuleGraph, input_shape: [usize; 4]) -> Result<u64> {
    Ok(breakdown(graph, input_shape)?.iter().map(|r| r.macs).sum())
}

/// Largest total size of simultaneously live activations when nodes execute
/// in stored order. A tensor is live from its producing step through the
/// step of its last consumer; the graph output stays live to the end.
pub fn estimate_peak_memory(graph: &ModuleGraph, input_shape: [usize; 4], batch: usize) -> Result<u64> {
    let shape = [batch, input_shape[1], input_shape[2], input_shape[3]];
    let shapes = graph.infer_shapes(shape)?;
    let sizes: Vec<u64> = shapes
        .iter()
        .map(|s| s.iter().product::<usize>() as u64 * ACTIVATION_BYTES)
        .collect();
    let mut last = graph.last_uses();
    last[graph.output] = graph.nodes.len();
    let mut live = 0u64;
    let mut peak = 0u64;
    let mut frees: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len() + 1];
    for (j, &l) in last.iter().enumerate() {
        frees[l].push(j);
    }
    for i in 0..graph.nodes.len() {
        live += sizes[i];
        peak = peak.max(live);
        for &j in &frees[i] {
            live -= sizes[j];
        }
    }
    Ok(peak)
}

pub fn cost_report(graph: &ModuleGraph, model: &str, input_shape: [usize; 4]) -> Result<CostReport> {
    let layers = breakdown(graph, input_shape)?;
    Ok(CostReport {
        schema: COST_SCHEMA.into(),
        model: model.into(),
        input_shape,
        params: layers.iter().map(|r| r.params).sum(),
        macs: layers.iter().map(|r| r.macs).sum(),
        peak_activation_bytes: estimate_peak_memory(graph, input_shape, 1)?,
        layers,
    })
}

impl CostReport {
    /// `layer,kind,params,macs,out_shape` rows; shapes as `1x64x56x56`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,params,macs,out_shape\n");
        for r in &self.layers {
            let shape: Vec<String> = r.out_shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer,
                r.kind,
                r.params,
                r.macs,
                shape.join("x")
            ));
        }
        out
    }

    /// Totals only, without the per-layer rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": self.schema,
            "model": self.model,
            "input_shape": self.input_shape,
            "params": self.params,
            "macs": self.macs,
            "gmacs": self.macs as f64 / 1e9,
            "peak_activation_bytes": self.peak_activation_bytes,
            "layers": self.layers.len(),
        })
    }
}
