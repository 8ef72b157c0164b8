//! Building blocks as graph fragments: the feature mixer, transitions, stems,
//! the classic bottleneck dense block and whole dense stages.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::OpUnderTest;
use crate::graph::{
    drop_path_factors, forward_bound, ArchMeta, GraphBuilder, Mode, ModuleGraph, NodeKind,
    ParamStore, StageInfo,
};
use crate::ops::pointwise::{scale_samples, Activation};
use crate::ops::pool::PoolKind;
use crate::tensor::{Real, Tensor};

pub use crate::ops::dense::channel_rescale;

/// What the mixer's expansion ratio multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionBase {
    /// Hidden width = ER · input channels.
    #[default]
    Input,
    /// Hidden width = ER · growth rate (the original DenseNet coupling).
    GrowthRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub c_in: usize,
    pub growth_rate: usize,
    pub expansion_ratio: f64,
    pub kernel: usize,
    pub rescale: bool,
    pub drop_rate: f64,
    #[serde(default)]
    pub expansion_base: ExpansionBase,
}

impl MixerConfig {
    pub fn new(c_in: usize, growth_rate: usize) -> Self {
        MixerConfig {
            c_in,
            growth_rate,
            expansion_ratio: 4.0,
            kernel: 7,
            rescale: false,
            drop_rate: 0.0,
            expansion_base: ExpansionBase::Input,
        }
    }

    pub fn intermediate(&self) -> usize {
        let base = match self.expansion_base {
            ExpansionBase::Input => self.c_in,
            ExpansionBase::GrowthRate => self.growth_rate,
        };
        (self.expansion_ratio * base as f64).round() as usize
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.growth_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 {
            return Err(Error::Config("mixer growth rate must be positive".into()));
        }
        if !(self.expansion_ratio > 0.0) {
            return Err(Error::Config(format!(
                "mixer expansion ratio must be positive, got {}",
                self.expansion_ratio
            )));
        }
        if self.c_in == 0 || self.intermediate() < 1 {
            return Err(Error::Config("mixer widths must be at least 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("mixer kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop rate {} outside [0, 1)", self.drop_rate)));
        }
        Ok(())
    }
}

/// Depthwise k×k → LN → 1×1 expand → GELU → 1×1 to GR → [re-scale] →
/// [drop path] → concat with the block input.
pub fn append_feature_mixer(
    b: &mut GraphBuilder,
    x: usize,
    cfg: &MixerConfig,
    prefix: &str,
) -> Result<usize> {
    cfg.validate()?;
    if b.channels(x) != cfg.c_in {
        return Err(Error::Config(format!(
            "{prefix}: mixer built for {} channels applied to {}",
            cfg.c_in,
            b.channels(x)
        )));
    }
    let c = cfg.c_in;
    let k = cfg.kernel;
    let dw = b.conv(format!("{prefix}.dwconv"), x, c, k, 1, k / 2, c, true)?;
    let norm = b.layer_norm(format!("{prefix}.norm"), dw)?;
    let pw1 = b.conv(format!("{prefix}.pwconv1"), norm, cfg.intermediate(), 1, 1, 0, 1, true)?;
    let act = b.activation(format!("{prefix}.act"), pw1, Activation::Gelu)?;
    let mut branch = b.conv(format!("{prefix}.pwconv2"), act, cfg.growth_rate, 1, 1, 0, 1, true)?;
    if cfg.rescale {
        branch = b.push(
            format!("{prefix}.rescale"),
            NodeKind::ChannelRescale {
                channels: cfg.growth_rate,
            },
            &[branch],
        )?;
    }
    if cfg.drop_rate > 0.0 {
        branch = b.push(
            format!("{prefix}.drop_path"),
            NodeKind::DropPath {
                rate: cfg.drop_rate,
            },
            &[branch],
        )?;
    }
    b.push(format!("{prefix}.concat"), NodeKind::Concat, &[x, branch])
}

pub fn build_feature_mixer(cfg: &MixerConfig) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(cfg.c_in);
    let out = append_feature_mixer(&mut b, 0, cfg, "mixer")?;
    b.finish(
        out,
        ArchMeta {
            kind: "feature_mixer".into(),
            config: Some(serde_json::to_value(cfg)?),
            ..ArchMeta::default()
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// LN → conv with kernel = stride.
    #[default]
    Refined,
    /// BN → ReLU → 1×1 conv → 2×2 average pool when downsampling.
    Classic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub c_in: usize,
    pub ratio: f64,
    pub stride: usize,
    pub rounding: usize,
    #[serde(default)]
    pub kind: TransitionKind,
}

/// `ceil(ratio · c / rounding) · rounding`.
pub fn compressed_width(c: usize, ratio: f64, rounding: usize) -> usize {
    let r = rounding.max(1);
    ((ratio * c as f64 / r as f64).ceil() as usize) * r
}

impl TransitionConfig {
    pub fn new(c_in: usize, ratio: f64, stride: usize) -> Self {
        TransitionConfig {
            c_in,
            ratio,
            stride,
            rounding: 8,
            kind: TransitionKind::Refined,
        }
    }

    pub fn out_channels(&self) -> usize {
        compressed_width(self.c_in, self.ratio, self.rounding)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "transition ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!(
                "transition stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.rounding == 0 || self.c_in == 0 {
            return Err(Error::Config("transition widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn append_transition(
    b: &mut GraphBuilder,
    x: usize,
    cfg: &TransitionConfig,
    prefix: &str,
) -> Result<usize> {
    cfg.validate()?;
    let c_out = cfg.out_channels();
    match cfg.kind {
        TransitionKind::Refined => {
            let norm = b.layer_norm(format!("{prefix}.norm"), x)?;
            b.conv(format!("{prefix}.conv"), norm, c_out, cfg.stride, cfg.stride, 0, 1, false)
        }
        TransitionKind::Classic => {
            let norm = b.batch_norm(format!("{prefix}.norm"), x)?;
            let act = b.activation(format!("{prefix}.act"), norm, Activation::Relu)?;
            let conv = b.conv(format!("{prefix}.conv"), act, c_out, 1, 1, 0, 1, false)?;
            if cfg.stride == 1 {
                return Ok(conv);
            }
            b.push(
                format!("{prefix}.pool"),
                NodeKind::Pool {
                    kind: PoolKind::Avg,
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
                &[conv],
            )
        }
    }
}

pub fn build_transition(cfg: &TransitionConfig) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(cfg.c_in);
    let out = append_transition(&mut b, 0, cfg, "transition")?;
    b.finish(
        out,
        ArchMeta {
            kind: "transition".into(),
            config: Some(serde_json::to_value(cfg)?),
            ..ArchMeta::default()
        },
    )
}

pub const PATCH_SIZE: usize = 4;

/// 4×4 stride-4 patch embedding followed by LN.
pub fn append_patchify_stem(b: &mut GraphBuilder, x: usize, out_channels: usize) -> Result<usize> {
    if out_channels == 0 {
        return Err(Error::Config("stem width must be at least 1".into()));
    }
    let conv = b.conv("stem.conv", x, out_channels, PATCH_SIZE, PATCH_SIZE, 0, 1, true)?;
    b.layer_norm("stem.norm", conv)
}

/// 7×7 stride-2 conv → BN → ReLU → 3×3 stride-2 max pool.
pub fn append_classic_stem(b: &mut GraphBuilder, x: usize, out_channels: usize) -> Result<usize> {
    let conv = b.conv("stem.conv", x, out_channels, 7, 2, 3, 1, false)?;
    let norm = b.batch_norm("stem.norm", conv)?;
    let act = b.activation("stem.act", norm, Activation::Relu)?;
    b.push(
        "stem.pool",
        NodeKind::Pool {
            kind: PoolKind::Max,
            kernel: 3,
            stride: 2,
            pad: 1,
        },
        &[act],
    )
}

pub fn build_stem(out_channels: usize) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(3);
    let out = append_patchify_stem(&mut b, 0, out_channels)?;
    b.finish(
        out,
        ArchMeta {
            kind: "patchify_stem".into(),
            ..ArchMeta::default()
        },
    )
}

/// Drop-path on a branch tensor: in train mode each sample is zeroed with
/// probability `rate` and otherwise scaled by 1/(1 − rate); eval mode (and
/// rate 0) return the input untouched without drawing from `rng`.
pub fn stochastic_depth<T: Real>(
    features: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("drop rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(features.clone());
    }
    let factors = drop_path_factors::<T>(features.shape()[0], rate, rng);
    scale_samples(features, &factors)
}

/// BN → ReLU → 1×1 (mult·GR) → BN → ReLU → 3×3 (GR) → concat.
pub fn append_classic_dense_block(
    b: &mut GraphBuilder,
    x: usize,
    growth_rate: usize,
    bottleneck_mult: usize,
    drop_rate: f64,
    prefix: &str,
) -> Result<usize> {
    if growth_rate == 0 || bottleneck_mult == 0 {
        return Err(Error::Config("classic dense block needs GR ≥ 1".into()));
    }
    let n1 = b.batch_norm(format!("{prefix}.norm1"), x)?;
    let a1 = b.activation(format!("{prefix}.act1"), n1, Activation::Relu)?;
    let c1 = b.conv(format!("{prefix}.conv1"), a1, bottleneck_mult * growth_rate, 1, 1, 0, 1, false)?;
    let n2 = b.batch_norm(format!("{prefix}.norm2"), c1)?;
    let a2 = b.activation(format!("{prefix}.act2"), n2, Activation::Relu)?;
    let mut branch = b.conv(format!("{prefix}.conv2"), a2, growth_rate, 3, 1, 1, 1, false)?;
    if drop_rate > 0.0 {
        branch = b.push(
            format!("{prefix}.drop_path"),
            NodeKind::DropPath { rate: drop_rate },
            &[branch],
        )?;
    }
    b.push(format!("{prefix}.concat"), NodeKind::Concat, &[x, branch])
}

pub fn build_classic_dense_block(
    c_in: usize,
    growth_rate: usize,
    bottleneck_mult: usize,
) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(c_in);
    let out = append_classic_dense_block(&mut b, 0, growth_rate, bottleneck_mult, 0.0, "block")?;
    b.finish(
        out,
        ArchMeta {
            kind: "classic_dense_block".into(),
            ..ArchMeta::default()
        },
    )
}

/// Which block a dense stage stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockTemplate {
    Mixer {
        expansion_ratio: f64,
        kernel: usize,
        rescale: bool,
        expansion_base: ExpansionBase,
    },
    ClassicDense {
        bottleneck_mult: usize,
    },
}

impl Default for BlockTemplate {
    fn default() -> Self {
        BlockTemplate::Mixer {
            expansion_ratio: 4.0,
            kernel: 7,
            rescale: false,
            expansion_base: ExpansionBase::Input,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseStageConfig {
    pub c_in: usize,
    pub growth_rate: usize,
    pub blocks: usize,
    /// Blocks between stride-1 transitions; 0 disables them.
    pub transition_interval: usize,
    pub transition_ratio: f64,
    pub rounding: usize,
    pub transition_kind: TransitionKind,
    pub block: BlockTemplate,
    /// One drop rate per block.
    pub drop_rates: Vec<f64>,
}

impl DenseStageConfig {
    pub fn new(c_in: usize, growth_rate: usize, blocks: usize) -> Self {
        DenseStageConfig {
            c_in,
            growth_rate,
            blocks,
            transition_interval: 3,
            transition_ratio: 0.5,
            rounding: 8,
            transition_kind: TransitionKind::Refined,
            block: BlockTemplate::default(),
            drop_rates: vec![0.0; blocks],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("a dense stage needs at least one block".into()));
        }
        if self.transition_interval > 0 && self.blocks % self.transition_interval != 0 {
            return Err(Error::Config(format!(
                "stage block count {} is not divisible by the transition interval {}",
                self.blocks, self.transition_interval
            )));
        }
        if self.drop_rates.len() != self.blocks {
            return Err(Error::Config("one drop rate per block is required".into()));
        }
        Ok(())
    }

    /// Channel width after each block and each stride-1 transition.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut c = self.c_in;
        let mut trace = Vec::new();
        for i in 0..self.blocks {
            c += self.growth_rate;
            trace.push(c);
            let end_of_group = self.transition_interval > 0 && (i + 1) % self.transition_interval == 0;
            if end_of_group && i + 1 < self.blocks {
                c = compressed_width(c, self.transition_ratio, self.rounding);
                trace.push(c);
            }
        }
        trace
    }
}

/// Output of [`append_dense_stage`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub node: usize,
    pub channels: usize,
    pub trace: Vec<usize>,
    pub transitions: usize,
}

/// Blocks in groups of `transition_interval`, each group but the last followed
/// by a stride-1 compressing transition.
pub fn append_dense_stage(
    b: &mut GraphBuilder,
    x: usize,
    cfg: &DenseStageConfig,
    prefix: &str,
) -> Result<StageOutput> {
    cfg.validate()?;
    let mut cur = x;
    let mut trace = Vec::new();
    let mut transitions = 0;
    for i in 0..cfg.blocks {
        let block_prefix = format!("{prefix}.blocks.{i}");
        cur = match &cfg.block {
            BlockTemplate::Mixer {
                expansion_ratio,
                kernel,
                rescale,
                expansion_base,
            } => {
                let m = MixerConfig {
                    c_in: b.channels(cur),
                    growth_rate: cfg.growth_rate,
                    expansion_ratio: *expansion_ratio,
                    kernel: *kernel,
                    rescale: *rescale,
                    drop_rate: cfg.drop_rates[i],
                    expansion_base: *expansion_base,
                };
                append_feature_mixer(b, cur, &m, &block_prefix)?
            }
            BlockTemplate::ClassicDense { bottleneck_mult } => append_classic_dense_block(
                b,
                cur,
                cfg.growth_rate,
                *bottleneck_mult,
                cfg.drop_rates[i],
                &block_prefix,
            )?,
        };
        trace.push(b.channels(cur));
        let end_of_group = cfg.transition_interval > 0 && (i + 1) % cfg.transition_interval == 0;
        if end_of_group && i + 1 < cfg.blocks {
            let t = TransitionConfig {
                c_in: b.channels(cur),
                ratio: cfg.transition_ratio,
                stride: 1,
                rounding: cfg.rounding,
                kind: cfg.transition_kind,
            };
            cur = append_transition(b, cur, &t, &format!("{prefix}.transitions.{transitions}"))?;
            transitions += 1;
            trace.push(b.channels(cur));
        }
    }
    Ok(StageOutput {
        node: cur,
        channels: b.channels(cur),
        trace,
        transitions,
    })
}

/// A standalone mixer stage fragment and its output width.
pub fn build_dense_stage(
    c_in: usize,
    growth_rate: usize,
    blocks: usize,
    transition_interval: usize,
    transition_ratio: f64,
) -> Result<(ModuleGraph, usize)> {
    let cfg = DenseStageConfig {
        transition_interval,
        transition_ratio,
        ..DenseStageConfig::new(c_in, growth_rate, blocks)
    };
    let mut b = GraphBuilder::new(c_in);
    let out = append_dense_stage(&mut b, 0, &cfg, "stage")?;
    let stage = StageInfo {
        index: 0,
        growth_rate,
        blocks,
        er: 4.0,
        in_channels: c_in,
        out_channels: out.channels,
        entry_stride: 1,
        transitions: out.transitions,
        channel_trace: out.trace,
        output_node: out.node,
    };
    let g = b.finish(
        out.node,
        ArchMeta {
            kind: "dense_stage".into(),
            stages: vec![stage],
            config: Some(serde_json::to_value(&cfg)?),
            ..ArchMeta::default()
        },
    )?;
    Ok((g, out.channels))
}

/// Two re-scaled mixers between a small stem and a linear head; used as the
/// end-to-end gradient check.
pub fn micro_model() -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(2);
    let stem = b.conv("stem.conv", 0, 4, 2, 2, 0, 1, true)?;
    let stem = b.layer_norm("stem.norm", stem)?;
    let mut cur = stem;
    for i in 0..2 {
        let cfg = MixerConfig {
            kernel: 3,
            expansion_ratio: 2.0,
            rescale: true,
            ..MixerConfig::new(b.channels(cur), 3)
        };
        cur = append_feature_mixer(&mut b, cur, &cfg, &format!("blocks.{i}"))?;
    }
    let t = TransitionConfig {
        rounding: 2,
        ..TransitionConfig::new(b.channels(cur), 0.5, 1)
    };
    cur = append_transition(&mut b, cur, &t, "transition")?;
    let pool = b.push("head.pool", NodeKind::GlobalAvgPool, &[cur])?;
    let norm = b.layer_norm("head.norm", pool)?;
    let flat = b.push("head.flatten", NodeKind::Flatten, &[norm])?;
    let c = b.channels(flat);
    let fc = b.push(
        "head.fc",
        NodeKind::Linear {
            in_features: c,
            out_features: 3,
            bias: true,
        },
        &[flat],
    )?;
    b.finish(
        fc,
        ArchMeta {
            kind: "micro_model".into(),
            ..ArchMeta::default()
        },
    )
}

/// Gradient-check entry for [`micro_model`]: the input and every learnable
/// tensor are checked.
pub fn micro_model_op() -> OpUnderTest {
    let graph = micro_model().expect("micro model builds");
    let mut shapes = vec![vec![2, 2, 6, 6]];
    let mut slots = Vec::new();
    for node in &graph.nodes {
        let ps = node.kind.param_shapes();
        slots.push(ps.len());
        shapes.extend(ps.into_iter().map(|(_, s)| s));
    }
    OpUnderTest::new("micro_model_2_mixers", shapes, 1e-4, move |tape, vars| {
        let mut bound = Vec::with_capacity(slots.len());
        let mut next = 1;
        for &n in &slots {
            bound.push(vars[next..next + n].to_vec());
            next += n;
        }
        let mut running = ParamStore::<f64>::init(&graph, 0).running;
        let pass = forward_bound(&graph, &mut running, tape, vars[0], bound, Mode::Eval, None, &[])?;
        Ok(pass.output)
    })
}
