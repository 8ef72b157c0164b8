//! Named architectures: the RDNet presets, the DenseNet-201 baseline and the
//! intermediate models of the modernization ledger.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    append_classic_stem, append_dense_stage, append_patchify_stem, append_transition,
    BlockTemplate, DenseStageConfig, ExpansionBase, TransitionConfig, TransitionKind, PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::graph::{
    ArchMeta, GraphBuilder, HeadInfo, ModuleGraph, NodeKind, StageInfo, StemInfo, TransitionInfo,
};
use crate::ops::pointwise::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Mixer,
    ClassicDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 4×4 stride-4 conv + LN.
    Patchify,
    /// 7×7 stride-2 conv + BN + ReLU + 3×3 stride-2 max pool.
    Classic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem: StemKind,
    pub stem_channels: usize,
    pub growth_rates: Vec<usize>,
    pub blocks: Vec<usize>,
    pub expansion_ratio: f64,
    pub expansion_base: ExpansionBase,
    /// Blocks between stride-1 transitions; 0 means none inside stages.
    pub transition_interval: usize,
    pub transition_ratio: f64,
    /// Transition outputs are rounded up to a multiple of this.
    pub rounding: usize,
    pub transition_kind: TransitionKind,
    pub kernel: usize,
    pub drop_path_rate: f64,
    /// Ramp drop rates linearly from 0 to `drop_path_rate` over the blocks
    /// instead of using the flat rate everywhere.
    #[serde(default)]
    pub drop_path_ramp: bool,
    pub num_classes: usize,
    pub block_kind: BlockKind,
    /// Bottleneck width in units of GR for classic dense blocks.
    pub bottleneck_mult: usize,
    pub channel_rescale: bool,
}

impl ModelConfig {
    fn rdnet(growth_rates: [usize; 4], blocks: [usize; 4]) -> Self {
        ModelConfig {
            stem: StemKind::Patchify,
            stem_channels: growth_rates[0],
            growth_rates: growth_rates.to_vec(),
            blocks: blocks.to_vec(),
            expansion_ratio: 4.0,
            expansion_base: ExpansionBase::Input,
            transition_interval: 3,
            transition_ratio: 0.5,
            rounding: 8,
            transition_kind: TransitionKind::Refined,
            kernel: 7,
            drop_path_rate: 0.0,
            drop_path_ramp: false,
            num_classes: 1000,
            block_kind: BlockKind::Mixer,
            bottleneck_mult: 4,
            channel_rescale: true,
        }
    }

    pub fn rdnet_t() -> Self {
        Self::rdnet([64, 104, 128, 224], [3, 3, 12, 3])
    }

    pub fn rdnet_s() -> Self {
        Self::rdnet([64, 128, 128, 240], [3, 3, 21, 6])
    }

    pub fn rdnet_b() -> Self {
        Self::rdnet([96, 128, 168, 336], [3, 3, 21, 6])
    }

    pub fn rdnet_l() -> Self {
        Self::rdnet([128, 192, 256, 360], [3, 3, 24, 6])
    }

    pub fn densenet201() -> Self {
        ModelConfig {
            stem: StemKind::Classic,
            stem_channels: 64,
            growth_rates: vec![32; 4],
            blocks: vec![6, 12, 48, 32],
            expansion_ratio: 4.0,
            expansion_base: ExpansionBase::GrowthRate,
            transition_interval: 0,
            transition_ratio: 0.5,
            rounding: 1,
            transition_kind: TransitionKind::Classic,
            kernel: 3,
            drop_path_rate: 0.0,
            drop_path_ramp: false,
            num_classes: 1000,
            block_kind: BlockKind::ClassicDense,
            bottleneck_mult: 4,
            channel_rescale: false,
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.growth_rates.is_empty() {
            bad.push("at least one stage is required".to_string());
        }
        if self.growth_rates.len() != self.blocks.len() {
            bad.push(format!(
                "{} growth rates for {} stage block counts",
                self.growth_rates.len(),
                self.blocks.len()
            ));
        }
        if self.growth_rates.iter().any(|&g| g == 0) {
            bad.push(format!("growth rates must be positive: {:?}", self.growth_rates));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            bad.push(format!("every stage needs a block: {:?}", self.blocks));
        }
        if self.block_kind == BlockKind::Mixer && self.transition_interval > 0 {
            if let Some(b) = self.blocks.iter().find(|&&b| b % self.transition_interval != 0) {
                bad.push(format!(
                    "stage block count {b} is not divisible by transition_interval {}",
                    self.transition_interval
                ));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            bad.push(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if !(self.transition_ratio > 0.0 && self.transition_ratio <= 1.0) {
            bad.push(format!("transition_ratio {} outside (0, 1]", self.transition_ratio));
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.rounding == 0 {
            bad.push("stem_channels, num_classes and rounding must be positive".to_string());
        }
        if !(self.expansion_ratio > 0.0) {
            bad.push(format!("expansion_ratio {} must be positive", self.expansion_ratio));
        }
        if self.kernel % 2 == 0 {
            bad.push(format!("kernel {} must be odd", self.kernel));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn template(&self) -> BlockTemplate {
        match self.block_kind {
            BlockKind::Mixer => BlockTemplate::Mixer {
                expansion_ratio: self.expansion_ratio,
                kernel: self.kernel,
                rescale: self.channel_rescale,
                expansion_base: self.expansion_base,
            },
            BlockKind::ClassicDense => BlockTemplate::ClassicDense {
                bottleneck_mult: self.bottleneck_mult,
            },
        }
    }

    /// Drop rate per block.
    pub fn drop_schedule(&self) -> Vec<f64> {
        let total: usize = self.blocks.iter().sum();
        (0..total)
            .map(|i| {
                if !self.drop_path_ramp || total <= 1 {
                    self.drop_path_rate
                } else {
                    self.drop_path_rate * i as f64 / (total - 1) as f64
                }
            })
            .collect()
    }
}

pub const PRESETS: [&str; 5] = ["rdnet_t", "rdnet_s", "rdnet_b", "rdnet_l", "densenet201"];

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "rdnet_t" => Ok(ModelConfig::rdnet_t()),
        "rdnet_s" => Ok(ModelConfig::rdnet_s()),
        "rdnet_b" => Ok(ModelConfig::rdnet_b()),
        "rdnet_l" => Ok(ModelConfig::rdnet_l()),
        "densenet201" => Ok(ModelConfig::densenet201()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected one of {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Stem → stages (with stride-1 transitions inside) joined by stride-2
/// transitions → head. Mixer models use GAP → LN → linear; classic models
/// BN → ReLU → GAP → linear.
pub fn build_model(cfg: &ModelConfig) -> Result<ModuleGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(3);
    let (mut cur, stem) = match cfg.stem {
        StemKind::Patchify => (
            append_patchify_stem(&mut b, 0, cfg.stem_channels)?,
            StemInfo {
                kind: "patchify".into(),
                patch: PATCH_SIZE,
                stride: PATCH_SIZE,
                channels: cfg.stem_channels,
            },
        ),
        StemKind::Classic => (
            append_classic_stem(&mut b, 0, cfg.stem_channels)?,
            StemInfo {
                kind: "classic".into(),
                patch: 7,
                stride: 4,
                channels: cfg.stem_channels,
            },
        ),
    };
    let drops = cfg.drop_schedule();
    let mut block_offset = 0;
    let mut stages = Vec::new();
    for (s, (&gr, &nb)) in cfg.growth_rates.iter().zip(&cfg.blocks).enumerate() {
        let mut entry_stride = 1;
        if s > 0 {
            let t = TransitionConfig {
                c_in: b.channels(cur),
                ratio: cfg.transition_ratio,
                stride: 2,
                rounding: cfg.rounding,
                kind: cfg.transition_kind,
            };
            cur = append_transition(&mut b, cur, &t, &format!("stages.{s}.downsample"))?;
            entry_stride = 2;
        }
        let interval = match cfg.block_kind {
            BlockKind::Mixer => cfg.transition_interval,
            BlockKind::ClassicDense => {
                if cfg.transition_interval > 0 && nb % cfg.transition_interval == 0 {
                    cfg.transition_interval
                } else {
                    0
                }
            }
        };
        let stage_cfg = DenseStageConfig {
            c_in: b.channels(cur),
            growth_rate: gr,
            blocks: nb,
            transition_interval: interval,
            transition_ratio: cfg.transition_ratio,
            rounding: cfg.rounding,
            transition_kind: cfg.transition_kind,
            block: cfg.template(),
            drop_rates: drops[block_offset..block_offset + nb].to_vec(),
        };
        block_offset += nb;
        let c_in = stage_cfg.c_in;
        let out = append_dense_stage(&mut b, cur, &stage_cfg, &format!("stages.{s}"))?;
        cur = out.node;
        stages.push(StageInfo {
            index: s,
            growth_rate: gr,
            blocks: nb,
            er: cfg.expansion_ratio,
            in_channels: c_in,
            out_channels: out.channels,
            entry_stride,
            transitions: out.transitions,
            channel_trace: out.trace,
            output_node: out.node,
        });
    }
    let features = b.channels(cur);
    let pooled = match cfg.block_kind {
        BlockKind::Mixer => {
            let p = b.push("head.pool", NodeKind::GlobalAvgPool, &[cur])?;
            b.layer_norm("head.norm", p)?
        }
        BlockKind::ClassicDense => {
            let n = b.batch_norm("head.norm", cur)?;
            let a = b.activation("head.act", n, Activation::Relu)?;
            b.push("head.pool", NodeKind::GlobalAvgPool, &[a])?
        }
    };
    let flat = b.push("head.flatten", NodeKind::Flatten, &[pooled])?;
    let fc = b.push(
        "head.fc",
        NodeKind::Linear {
            in_features: features,
            out_features: cfg.num_classes,
            bias: true,
        },
        &[flat],
    )?;
    let kind = match cfg.block_kind {
        BlockKind::Mixer => "rdnet",
        BlockKind::ClassicDense => "densenet",
    };
    b.finish(
        fc,
        ArchMeta {
            kind: kind.into(),
            stem: Some(stem),
            stages,
            transition: Some(TransitionInfo {
                interval: cfg.transition_interval,
                ratio: cfg.transition_ratio,
                rounding: cfg.rounding,
            }),
            head: Some(HeadInfo {
                classes: cfg.num_classes,
                features,
            }),
            config: Some(serde_json::to_value(cfg)?),
        },
    )
}

pub const LEDGER_STEPS: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

/// Configuration after modernization step `step`; each step applies one
/// change on top of the previous.
pub fn ledger_config(step: char) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::densenet201();
    for s in LEDGER_STEPS {
        if s > step {
            break;
        }
        match s {
            'a' => {}
            'b' => {
                cfg.growth_rates = vec![120; 4];
                cfg.blocks = vec![3, 3, 12, 3];
            }
            'c' => {
                cfg.block_kind = BlockKind::Mixer;
                cfg.kernel = 7;
            }
            'd' => {
                cfg.expansion_base = ExpansionBase::Input;
                cfg.growth_rates = vec![60; 4];
            }
            'e' => {
                cfg.transition_interval = 3;
                cfg.rounding = 8;
                cfg.growth_rates = vec![64, 104, 128, 192];
            }
            'f' => cfg.stem = StemKind::Patchify,
            'g' => cfg.transition_kind = TransitionKind::Refined,
            'h' => cfg.channel_rescale = true,
            _ => unreachable!(),
        }
    }
    if !LEDGER_STEPS.contains(&step) {
        return Err(Error::Config(format!(
            "unknown ledger step {step:?}; expected one of a..h"
        )));
    }
    Ok(cfg)
}

pub fn build_ledger_model(step: char) -> Result<ModuleGraph> {
    let cfg = ledger_config(step)?;
    let mut g = build_model(&cfg)?;
    g.meta.kind = format!("ledger_{step}");
    Ok(g)
}

/// Resolves `rdnet_t`, `ledger:b`, and similar model names.
fn ledger_step(name: &str) -> Option<Result<char>> {
    let step = name.strip_prefix("ledger:")?;
    let mut chars = step.chars();
    Some(match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::Config(format!("bad ledger step {step:?}"))),
    })
}

/// Configuration for a preset name or `ledger:<step>`.
pub fn config_by_name(name: &str) -> Result<ModelConfig> {
    match ledger_step(name) {
        Some(step) => ledger_config(step?),
        None => preset(name),
    }
}

pub fn model_by_name(name: &str) -> Result<ModuleGraph> {
    match ledger_step(name) {
        Some(step) => build_ledger_model(step?),
        None => build_model(&preset(name)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rdnet_t_channel_trace() {
        let g = build_model(&ModelConfig::rdnet_t()).unwrap();
        let outs: Vec<usize> = g.meta.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(outs, vec![256, 440, 752, 1048]);
        let ins: Vec<usize> = g.meta.stages.iter().map(|s| s.in_channels).collect();
        assert_eq!(ins, vec![64, 128, 224, 376]);
        assert_eq!(
            g.meta.stages[2].channel_trace,
            vec![352, 480, 608, 304, 432, 560, 688, 344, 472, 600, 728, 368, 496, 624, 752]
        );
    }

    #[test]
    fn stage_resolutions() {
        let g = build_model(&ModelConfig::rdnet_t()).unwrap();
        let shapes = g.infer_shapes([1, 3, 224, 224]).unwrap();
        let res: Vec<usize> = g.meta.stages.iter().map(|s| shapes[s.output_node][2]).collect();
        assert_eq!(res, vec![56, 28, 14, 7]);
        assert_eq!(shapes[g.output], vec![1, 1000]);
        let d = build_model(&ModelConfig::densenet201()).unwrap();
        let shapes = d.infer_shapes([1, 3, 224, 224]).unwrap();
        let res: Vec<usize> = d.meta.stages.iter().map(|s| shapes[s.output_node][2]).collect();
        assert_eq!(res, vec![56, 28, 14, 7]);
    }

    #[test]
    fn densenet201_widths() {
        let g = build_model(&ModelConfig::densenet201()).unwrap();
        let outs: Vec<usize> = g.meta.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(outs, vec![256, 512, 1792, 1920]);
    }

    #[test]
    fn invalid_config_lists_violations() {
        let mut cfg = ModelConfig::rdnet_t();
        cfg.blocks = vec![3, 4, 12, 3];
        cfg.drop_path_rate = 1.0;
        let msg = build_model(&cfg).unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
        assert!(msg.contains("drop_path_rate"), "{msg}");
    }

    #[test]
    fn ledger_steps_apply_in_order() {
        assert_eq!(ledger_config('e').unwrap().growth_rates, vec![64, 104, 128, 192]);
        assert_eq!(ledger_config('c').unwrap().growth_rates, vec![120; 4]);
        assert_eq!(ledger_config('d').unwrap().growth_rates, vec![60; 4]);
        assert!(ledger_config('z').is_err());
        for s in LEDGER_STEPS {
            let g = build_ledger_model(s).unwrap();
            assert_eq!(g.infer_shapes([1, 3, 224, 224]).unwrap()[g.output], vec![1, 1000]);
        }
    }

    #[test]
    fn model_names_resolve() {
        assert!(model_by_name("rdnet_s").is_ok());
        assert!(model_by_name("ledger:b").is_ok());
        assert!(model_by_name("ledger:bb").is_err());
        assert!(model_by_name("resnet50").is_err());
    }

    #[test]
    fn drop_schedule_flat_or_ramped() {
        let mut cfg = ModelConfig::rdnet_t();
        cfg.drop_path_rate = 0.2;
        assert!(cfg.drop_schedule().iter().all(|&r| r == 0.2));
        cfg.drop_path_ramp = true;
        let d = cfg.drop_schedule();
        assert_eq!(d.len(), 21);
        assert_eq!(d[0], 0.0);
        assert!((d[20] - 0.2).abs() < 1e-15);
    }
}
