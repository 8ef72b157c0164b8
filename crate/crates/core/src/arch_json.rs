//! Architecture description as JSON, and the configuration hash derived from it.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ArchMeta, HeadInfo, ModuleGraph, Node, StageInfo, StemInfo, TransitionInfo};

pub const ARCH_SCHEMA: &str = "densecat.architecture/v1";

#[derive(Serialize)]
struct ArchOut<'a> {
    schema: &'static str,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stem: Option<&'a StemInfo>,
    stages: &'a [StageInfo],
    #[serde(skip_serializing_if = "Option::is_none")]
    transition: Option<&'a TransitionInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    head: Option<&'a HeadInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a Value>,
    nodes: &'a [Node],
    output: usize,
}

#[derive(Deserialize)]
struct ArchIn {
    schema: String,
    #[serde(flatten)]
    meta: ArchMeta,
    nodes: Vec<Value>,
    output: usize,
}

/// Pretty-printed JSON with a fixed field order.
pub fn serialize_architecture(graph: &ModuleGraph) -> Result<String> {
    let m = &graph.meta;
    let out = ArchOut {
        schema: ARCH_SCHEMA,
        kind: &m.kind,
        stem: m.stem.as_ref(),
        stages: &m.stages,
        transition: m.transition.as_ref(),
        head: m.head.as_ref(),
        config: m.config.as_ref(),
        nodes: &graph.nodes,
        output: graph.output,
    };
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(s)
}

pub fn deserialize_architecture(text: &str) -> Result<ModuleGraph> {
    let raw: ArchIn = serde_json::from_str(text)?;
    if raw.schema != ARCH_SCHEMA {
        return Err(Error::Architecture(format!(
            "unsupported schema {:?}, expected {ARCH_SCHEMA:?}",
            raw.schema
        )));
    }
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (i, v) in raw.nodes.into_iter().enumerate() {
        let name = v
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        let node: Node = serde_json::from_value(v)
            .map_err(|e| Error::Architecture(format!("nodes[{i}] ({name}): {e}")))?;
        nodes.push(node);
    }
    let g = ModuleGraph {
        nodes,
        output: raw.output,
        meta: raw.meta,
    };
    g.validate()?;
    Ok(g)
}

/// SHA-256 of the serialized description, as lowercase hex.
pub fn config_hash(graph: &ModuleGraph) -> Result<String> {
    let text = serialize_architecture(graph)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
