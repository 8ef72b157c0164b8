//! Checkpoints: `weights.bin` (concatenated DCT1 tensors) plus a
//! `manifest.json` holding the architecture and each tensor's byte offset.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arch_json::{deserialize_architecture, serialize_architecture};
use crate::error::{Error, Result};
use crate::graph::{ModuleGraph, ParamStore, RunningStats};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_SCHEMA: &str = "densecat.checkpoint/v1";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn entries(graph: &ModuleGraph, params: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = params
        .named(graph)
        .into_iter()
        .map(|(n, t)| (n, (**t).clone()))
        .collect();
    for (node, stats) in graph.nodes.iter().zip(&params.running) {
        if let Some(s) = stats {
            let c = s.mean.len();
            out.push((
                format!("{}.running_mean", node.name),
                Tensor::from_vec(vec![c], s.mean.clone()).expect("non-empty stats"),
            ));
            out.push((
                format!("{}.running_var", node.name),
                Tensor::from_vec(vec![c], s.var.clone()).expect("non-empty stats"),
            ));
        }
    }
    out
}

pub fn save_checkpoint(dir: &Path, graph: &ModuleGraph, params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(WEIGHTS_FILE))?);
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in entries(graph, params) {
        tensors.push(TensorEntry {
            name,
            offset,
            shape: t.shape().to_vec(),
        });
        offset += write_tensor(&mut w, &t)?;
    }
    w.flush()?;
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA.into(),
        architecture: serde_json::from_str(&serialize_architecture(graph)?)?,
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModuleGraph, ParamStore<f32>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Architecture(format!("unsupported checkpoint schema {:?}", manifest.schema)));
    }
    let graph = deserialize_architecture(&serde_json::to_string(&manifest.architecture)?)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut params = ParamStore::<f32>::init(&graph, 0);
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let read_at = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::Architecture(format!("checkpoint lacks tensor {name}")))?;
        let start = e.offset as usize;
        if start > bytes.len() {
            return Err(Error::Format {
                offset: e.offset,
                detail: format!("{name} starts past the end of {WEIGHTS_FILE}"),
            });
        }
        let t = read_tensor(&mut Cursor::new(&bytes[start..]), e.offset)?;
        if t.shape() != shape {
            return Err(Error::Architecture(format!(
                "{name}: stored shape {:?}, architecture expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for (i, node) in graph.nodes.iter().enumerate() {
        for (j, (pname, shape)) in node.kind.param_shapes().iter().enumerate() {
            params.tensors[i][j] = Arc::new(read_at(&format!("{}.{pname}", node.name), shape)?);
        }
        if let Some(stats) = &params.running[i] {
            let c = [stats.mean.len()];
            let mean = read_at(&format!("{}.running_mean", node.name), &c)?;
            let var = read_at(&format!("{}.running_var", node.name), &c)?;
            params.running[i] = Some(RunningStats {
                mean: mean.into_data(),
                var: var.into_data(),
            });
        }
    }
    Ok((graph, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::infer;
    use crate::zoo::{build_model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_reproduces_outputs() {
        let mut cfg = ModelConfig::densenet201();
        cfg.growth_rates = vec![8, 8];
        cfg.blocks = vec![1, 1];
        cfg.stem_channels = 8;
        cfg.num_classes = 3;
        let g = build_model(&cfg).unwrap();
        let mut p = ParamStore::<f32>::init(&g, 4);
        p.running[2].as_mut().unwrap().mean[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &g, &p).unwrap();
        let (g2, mut p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(g2, g);
        assert_eq!(p2.running, p.running);
        let x = Tensor::<f32>::randn(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(infer(&g, &mut p, x.clone()).unwrap(), infer(&g2, &mut p2, x).unwrap());
    }

    #[test]
    fn manifest_offsets_are_consecutive() {
        let g = build_model(&ModelConfig {
            growth_rates: vec![8],
            blocks: vec![3],
            stem_channels: 8,
            num_classes: 2,
            ..ModelConfig::rdnet_t()
        })
        .unwrap();
        let p = ParamStore::<f32>::init(&g, 0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &g, &p).unwrap();
        let m: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let mut expect = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, expect);
            expect += crate::tensor::encoded_len(&e.shape);
        }
        assert_eq!(expect, fs::metadata(dir.path().join(WEIGHTS_FILE)).unwrap().len());
    }
}
