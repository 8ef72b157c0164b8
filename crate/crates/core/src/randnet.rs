//! Random networks for paired add-vs-concat comparisons under cost budgets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch_json::config_hash;
use crate::blocks::compressed_width;
use crate::cost::{count_macs, count_params, estimate_peak_memory};
use crate::error::{Error, Result};
use crate::graph::{ArchMeta, GraphBuilder, HeadInfo, ModuleGraph, NodeKind};
use crate::ops::pointwise::Activation;
use crate::train::data::{load_dataset, DatasetHandle, Split};
use crate::train::optim::OptimizerConfig;
use crate::train::trainer::{train, RunStatus, TrainConfig};

pub const SPEC_SCHEMA: &str = "densecat.randspec/v1";
pub const MAX_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    Add,
    Concat,
}

impl Shortcut {
    pub fn name(self) -> &'static str {
        match self {
            Shortcut::Add => "add",
            Shortcut::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceId {
    A,
    B,
    C,
    D,
    E,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    Batch,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandBlockKind {
    PreNorm,
    PostNorm,
    PostNormNoAct,
}

/// One augmentation "element" of the augmented spaces and its sweep values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentGrid {
    pub jitter_magnitudes: Vec<f64>,
    pub mixup_alphas: Vec<f64>,
    pub cutmix_alphas: Vec<f64>,
    pub drop_path_rates: Vec<f64>,
    pub random_erase_prob: f64,
}

impl Default for AugmentGrid {
    fn default() -> Self {
        AugmentGrid {
            jitter_magnitudes: vec![3.0, 5.0, 7.0],
            mixup_alphas: vec![0.1, 0.3, 0.5],
            cutmix_alphas: vec![0.1, 0.3, 0.5],
            drop_path_rates: vec![0.05, 0.1],
            random_erase_prob: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandSpec {
    pub schema: String,
    pub space_id: SpaceId,
    /// Inclusive block-count interval.
    pub depth: [usize; 2],
    /// Channel widths of add networks (and the stem width of concat networks).
    pub widths: Vec<usize>,
    /// Growth rates of concat networks, paired index-wise with `widths`.
    pub growth_rates: Vec<usize>,
    pub kernels: Vec<usize>,
    pub activations: Vec<Activation>,
    pub norms: Vec<NormChoice>,
    pub block_kinds: Vec<RandBlockKind>,
    /// Concat networks compress (stride 1, ratio 0.5, multiple of 8) after
    /// every this many blocks; 0 disables.
    pub compression_interval: usize,
    pub augmentation: Option<AugmentGrid>,
    pub optimizer: OptimizerConfig,
    pub input_size: usize,
    pub num_classes: usize,
}

impl RandSpec {
    /// Artifact defaults for each space: A–C widen the architecture choices,
    /// D adds augmentation, E additionally switches to AdamW.
    pub fn space(id: SpaceId) -> Self {
        let base = RandSpec {
            schema: SPEC_SCHEMA.into(),
            space_id: id,
            depth: [4, 16],
            widths: vec![16, 24, 32, 48, 64],
            growth_rates: vec![8, 12, 16, 24, 32],
            kernels: vec![3],
            activations: vec![Activation::Relu],
            norms: vec![NormChoice::Batch],
            block_kinds: vec![RandBlockKind::PostNorm],
            compression_interval: 4,
            augmentation: None,
            optimizer: OptimizerConfig::sgd(),
            input_size: 32,
            num_classes: 10,
        };
        let all_blocks = vec![RandBlockKind::PreNorm, RandBlockKind::PostNorm, RandBlockKind::PostNormNoAct];
        match id {
            SpaceId::A => base,
            SpaceId::B => RandSpec {
                kernels: vec![3, 5, 7],
                activations: Activation::ALL.to_vec(),
                ..base
            },
            SpaceId::C | SpaceId::D | SpaceId::E => RandSpec {
                kernels: vec![3, 5, 7],
                activations: Activation::ALL.to_vec(),
                norms: vec![NormChoice::Batch, NormChoice::Layer],
                block_kinds: all_blocks,
                augmentation: matches!(id, SpaceId::D | SpaceId::E).then(AugmentGrid::default),
                optimizer: if id == SpaceId::E {
                    OptimizerConfig::adamw()
                } else {
                    OptimizerConfig::sgd()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.schema != SPEC_SCHEMA {
            bad.push(format!("schema {:?} is not {SPEC_SCHEMA:?}", self.schema));
        }
        if self.depth[0] == 0 || self.depth[0] > self.depth[1] {
            bad.push(format!("depth interval {:?} is empty", self.depth));
        }
        if self.widths.is_empty() || self.widths.len() != self.growth_rates.len() {
            bad.push("widths and growth_rates must be non-empty and of equal length".into());
        }
        if self.widths.iter().chain(&self.growth_rates).any(|&w| w == 0) {
            bad.push("widths and growth rates must be positive".into());
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| ![1, 3, 5, 7].contains(k)) {
            bad.push(format!("kernels {:?} must be a non-empty subset of 1,3,5,7", self.kernels));
        }
        if self.activations.is_empty() || self.norms.is_empty() || self.block_kinds.is_empty() {
            bad.push("activation, norm and block-kind choices must be non-empty".into());
        }
        let augmented = self.augmentation.is_some();
        match self.space_id {
            SpaceId::D | SpaceId::E if !augmented => bad.push("spaces D and E include augmentation".into()),
            _ => {}
        }
        if self.space_id == SpaceId::E && !matches!(self.optimizer, OptimizerConfig::Adamw { .. }) {
            bad.push("space E uses adamw".into());
        }
        if self.input_size == 0 || self.num_classes < 2 {
            bad.push("input_size must be positive and num_classes ≥ 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_params: u64,
    pub max_macs: u64,
    pub max_activation_bytes: u64,
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.max_params == 0 || self.max_macs == 0 || self.max_activation_bytes == 0 {
            return Err(Error::Config("budget caps must all be positive".into()));
        }
        Ok(())
    }

    /// `(cap name, cost / cap)` for each cap.
    fn ratios(&self, c: &Costs) -> [(&'static str, f64); 3] {
        [
            ("max_params", c.params as f64 / self.max_params as f64),
            ("max_macs", c.macs as f64 / self.max_macs as f64),
            (
                "max_activation_bytes",
                c.activation_bytes as f64 / self.max_activation_bytes as f64,
            ),
        ]
    }

    pub fn admits(&self, c: &Costs) -> bool {
        self.ratios(c).iter().all(|(_, r)| *r <= 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub params: u64,
    pub macs: u64,
    pub activation_bytes: u64,
}

/// Architecture choices shared by both members of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choices {
    pub depth: usize,
    pub width_index: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub norm: NormChoice,
    pub block_kind: RandBlockKind,
}

/// Regularization applied to both runs of a pair in the augmented spaces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentChoice {
    pub element: String,
    pub jitter_magnitude: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub drop_path_rate: f64,
    pub random_erase_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandNetConfig {
    pub shortcut: Shortcut,
    pub depth: usize,
    /// Stem width; for add networks also the width of every block.
    pub width: usize,
    /// New channels per block (concat networks only).
    pub growth_rate: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub norm: NormChoice,
    pub block_kind: RandBlockKind,
    pub compression_interval: usize,
    pub drop_path_rate: f64,
    pub num_classes: usize,
    pub input_size: usize,
}

fn append_norm(b: &mut GraphBuilder, name: String, x: usize, norm: NormChoice) -> Result<usize> {
    match norm {
        NormChoice::Batch => b.batch_norm(name, x),
        NormChoice::Layer => b.layer_norm(name, x),
    }
}

/// One random block. `width` is the branch output: equal to the input width
/// for add, the growth rate for concat.
#[allow(clippy::too_many_arguments)]
pub fn append_randnet_block(
    b: &mut GraphBuilder,
    x: usize,
    kind: RandBlockKind,
    shortcut: Shortcut,
    width: usize,
    kernel: usize,
    activation: Activation,
    norm: NormChoice,
    drop_rate: f64,
    prefix: &str,
) -> Result<usize> {
    let c_in = b.channels(x);
    if shortcut == Shortcut::Add && width != c_in {
        return Err(Error::Config(format!(
            "{prefix}: additive shortcut needs branch width {width} == input width {c_in}"
        )));
    }
    let pad = kernel / 2;
    let mut branch = match kind {
        RandBlockKind::PreNorm => {
            let n = append_norm(b, format!("{prefix}.norm"), x, norm)?;
            let a = b.activation(format!("{prefix}.act"), n, activation)?;
            b.conv(format!("{prefix}.conv"), a, width, kernel, 1, pad, 1, true)?
        }
        RandBlockKind::PostNorm | RandBlockKind::PostNormNoAct => {
            let c = b.conv(format!("{prefix}.conv"), x, width, kernel, 1, pad, 1, false)?;
            append_norm(b, format!("{prefix}.norm"), c, norm)?
        }
    };
    if drop_rate > 0.0 {
        branch = b.push(format!("{prefix}.drop_path"), NodeKind::DropPath { rate: drop_rate }, &[branch])?;
    }
    let merged = match shortcut {
        Shortcut::Add => b.push(format!("{prefix}.add"), NodeKind::Add, &[x, branch])?,
        Shortcut::Concat => b.push(format!("{prefix}.concat"), NodeKind::Concat, &[x, branch])?,
    };
    if kind == RandBlockKind::PostNorm {
        return b.activation(format!("{prefix}.post_act"), merged, activation);
    }
    Ok(merged)
}

/// Standalone block fragment over `c_in` input channels.
pub fn build_randnet_block(
    kind: RandBlockKind,
    shortcut: Shortcut,
    c_in: usize,
    width: usize,
    kernel: usize,
    activation: Activation,
    norm: NormChoice,
) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(c_in);
    let out = append_randnet_block(&mut b, 0, kind, shortcut, width, kernel, activation, norm, 0.0, "block")?;
    b.finish(
        out,
        ArchMeta {
            kind: "randnet_block".into(),
            ..ArchMeta::default()
        },
    )
}

/// Stem conv 3×3 → norm → act, the sampled blocks (concat networks compress
/// after every `compression_interval` blocks), norm → GAP → linear.
pub fn build_randnet(cfg: &RandNetConfig) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(3);
    let stem = b.conv("stem.conv", 0, cfg.width, 3, 1, 1, 1, false)?;
    let stem = append_norm(&mut b, "stem.norm".into(), stem, cfg.norm)?;
    let mut cur = b.activation("stem.act", stem, cfg.activation)?;
    let branch_width = match cfg.shortcut {
        Shortcut::Add => cfg.width,
        Shortcut::Concat => cfg.growth_rate,
    };
    for i in 0..cfg.depth {
        cur = append_randnet_block(
            &mut b,
            cur,
            cfg.block_kind,
            cfg.shortcut,
            branch_width,
            cfg.kernel,
            cfg.activation,
            cfg.norm,
            cfg.drop_path_rate,
            &format!("blocks.{i}"),
        )?;
        let interval = cfg.compression_interval;
        if cfg.shortcut == Shortcut::Concat && interval > 0 && (i + 1) % interval == 0 && i + 1 < cfg.depth {
            let c = compressed_width(b.channels(cur), 0.5, 8);
            let n = append_norm(&mut b, format!("compress.{i}.norm"), cur, cfg.norm)?;
            cur = b.conv(format!("compress.{i}.conv"), n, c, 1, 1, 0, 1, false)?;
        }
    }
    let n = append_norm(&mut b, "head.norm".into(), cur, cfg.norm)?;
    let p = b.push("head.pool", NodeKind::GlobalAvgPool, &[n])?;
    let f = b.push("head.flatten", NodeKind::Flatten, &[p])?;
    let features = b.channels(f);
    let fc = b.push(
        "head.fc",
        NodeKind::Linear {
            in_features: features,
            out_features: cfg.num_classes,
            bias: true,
        },
        &[f],
    )?;
    b.finish(
        fc,
        ArchMeta {
            kind: format!("randnet_{}", cfg.shortcut.name()),
            head: Some(HeadInfo {
                classes: cfg.num_classes,
                features,
            }),
            config: Some(serde_json::to_value(cfg)?),
            ..ArchMeta::default()
        },
    )
}

pub fn randnet_costs(graph: &ModuleGraph, input_size: usize) -> Result<Costs> {
    let shape = [1, 3, input_size, input_size];
    Ok(Costs {
        params: count_params(graph),
        macs: count_macs(graph, shape)?,
        activation_bytes: estimate_peak_memory(graph, shape, 1)?,
    })
}

/// Draws every architecture choice uniformly from the spec.
pub fn sample_choices<R: Rng + ?Sized>(spec: &RandSpec, rng: &mut R) -> Choices {
    Choices {
        depth: rng.gen_range(spec.depth[0]..=spec.depth[1]),
        width_index: rng.gen_range(0..spec.widths.len()),
        kernel: *spec.kernels.choose(rng).expect("non-empty"),
        activation: *spec.activations.choose(rng).expect("non-empty"),
        norm: *spec.norms.choose(rng).expect("non-empty"),
        block_kind: *spec.block_kinds.choose(rng).expect("non-empty"),
    }
}

/// Every point of the discretized space, in a fixed order.
pub fn enumerate_choices(spec: &RandSpec) -> Vec<Choices> {
    let mut out = Vec::new();
    for depth in spec.depth[0]..=spec.depth[1] {
        for width_index in 0..spec.widths.len() {
            for &kernel in &spec.kernels {
                for &activation in &spec.activations {
                    for &norm in &spec.norms {
                        for &block_kind in &spec.block_kinds {
                            out.push(Choices {
                                depth,
                                width_index,
                                kernel,
                                activation,
                                norm,
                                block_kind,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn config_for(spec: &RandSpec, c: &Choices, shortcut: Shortcut, drop_path_rate: f64) -> RandNetConfig {
    RandNetConfig {
        shortcut,
        depth: c.depth,
        width: spec.widths[c.width_index],
        growth_rate: spec.growth_rates[c.width_index],
        kernel: c.kernel,
        activation: c.activation,
        norm: c.norm,
        block_kind: c.block_kind,
        compression_interval: spec.compression_interval,
        drop_path_rate,
        num_classes: spec.num_classes,
        input_size: spec.input_size,
    }
}

fn sample_augment<R: Rng + ?Sized>(grid: &AugmentGrid, rng: &mut R) -> AugmentChoice {
    let pick = |v: &[f64], rng: &mut R| *v.choose(rng).expect("non-empty grid");
    let mut a = AugmentChoice::default();
    match rng.gen_range(0..5) {
        0 => {
            a.element = "color_jitter".into();
            a.jitter_magnitude = pick(&grid.jitter_magnitudes, rng);
        }
        1 => {
            a.element = "mixup".into();
            a.mixup_alpha = pick(&grid.mixup_alphas, rng);
        }
        2 => {
            a.element = "cutmix".into();
            a.cutmix_alpha = pick(&grid.cutmix_alphas, rng);
        }
        3 => {
            a.element = "drop_path".into();
            a.drop_path_rate = pick(&grid.drop_path_rates, rng);
        }
        _ => {
            a.element = "random_erase".into();
            a.random_erase_prob = grid.random_erase_prob;
        }
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledNet {
    pub config: RandNetConfig,
    pub costs: Costs,
    pub config_hash: String,
    pub tries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPair {
    pub choices: Choices,
    pub augment: Option<AugmentChoice>,
    pub add: SampledNet,
    pub concat: SampledNet,
}

impl SampledPair {
    pub fn get(&self, s: Shortcut) -> &SampledNet {
        match s {
            Shortcut::Add => &self.add,
            Shortcut::Concat => &self.concat,
        }
    }
}

/// Rejection-samples one choice set whose add and concat networks both fit
/// the budget. A pure function of (spec, budget, seed).
pub fn sample_pair(spec: &RandSpec, budget: &Budget, seed: u64) -> Result<SampledPair> {
    spec.validate()?;
    budget.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: BTreeMap<&'static str, f64> = BTreeMap::new();
    for tries in 1..=MAX_TRIES {
        let choices = sample_choices(spec, &mut rng);
        let augment = spec.augmentation.as_ref().map(|g| sample_augment(g, &mut rng));
        let drop = augment.as_ref().map_or(0.0, |a| a.drop_path_rate);
        let mut nets = Vec::with_capacity(2);
        let mut ok = true;
        for s in [Shortcut::Add, Shortcut::Concat] {
            let config = config_for(spec, &choices, s, drop);
            let graph = build_randnet(&config)?;
            let costs = randnet_costs(&graph, spec.input_size)?;
            for (cap, r) in budget.ratios(&costs) {
                if r > 1.0 {
                    let e = best.entry(cap).or_insert(f64::INFINITY);
                    *e = e.min(r);
                }
            }
            ok &= budget.admits(&costs);
            nets.push(SampledNet {
                config_hash: config_hash(&graph)?,
                config,
                costs,
                tries,
            });
        }
        if ok {
            let concat = nets.pop().expect("two nets");
            let add = nets.pop().expect("two nets");
            return Ok(SampledPair {
                choices,
                augment,
                add,
                concat,
            });
        }
    }
    // the cap whose best attempt still overshot the most
    let (cap, ratio) = best
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or(("max_params", f64::INFINITY));
    Err(Error::Budget {
        tries: MAX_TRIES,
        cap: format!("{cap} (closest sample at {ratio:.3}× the cap)"),
    })
}

/// The `shortcut` member of the pair sampled from `seed`.
pub fn sample_network(spec: &RandSpec, shortcut: Shortcut, budget: &Budget, seed: u64) -> Result<SampledNet> {
    Ok(sample_pair(spec, budget, seed)?.get(shortcut).clone())
}

/// SplitMix64-style mixing of (master seed, pair, stream).
pub fn derive_seed(master: u64, pair: usize, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add((pair as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SAMPLE_STREAM: u64 = 0;

fn run_stream(s: Shortcut) -> u64 {
    match s {
        Shortcut::Add => 1,
        Shortcut::Concat => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub pair_id: usize,
    pub shortcut: Shortcut,
    pub seed: u64,
    pub config_hash: String,
    pub params: u64,
    pub macs: u64,
    pub final_acc: Option<f64>,
    pub epochs: usize,
    pub failed: bool,
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided P(X ≥ wins) for X ~ Binomial(wins + losses, 1/2).
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub schema: String,
    pub n_pairs: usize,
    pub master_seed: u64,
    pub add: KindStats,
    pub concat: KindStats,
    /// Concat beats add within a pair counts as a win.
    pub sign_test: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub runs: Vec<RunRecord>,
    pub pairs: Vec<SampledPair>,
    pub summary: PairedSummary,
    /// Sorted final accuracies per kind.
    pub cdf: BTreeMap<String, Vec<f64>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

/// One-sided binomial sign test, ties dropped.
pub fn sign_test(diffs: &[f64]) -> SignTest {
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let losses = diffs.iter().filter(|&&d| d < 0.0).count();
    let ties = diffs.len() - wins - losses;
    let n = wins + losses;
    // Σ_{k ≥ wins} C(n, k) / 2^n, in log space
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let p_value = if n == 0 {
        1.0
    } else {
        (wins..=n)
            .map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp())
            .sum::<f64>()
            .min(1.0)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

fn kind_stats(runs: &[RunRecord], s: Shortcut) -> KindStats {
    let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.shortcut == s).collect();
    let accs: Vec<f64> = mine.iter().filter_map(|r| r.final_acc).collect();
    let (mean, std) = mean_std(&accs);
    KindStats {
        count: accs.len(),
        failures: mine.iter().filter(|r| r.failed).count(),
        mean,
        std,
    }
}

pub const SUMMARY_SCHEMA: &str = "densecat.randnet_summary/v1";

/// Statistics over recorded runs: failed runs are excluded and counted; the
/// sign test uses pairs where both runs finished.
pub fn summarize(runs: &[RunRecord], n_pairs: usize, master_seed: u64) -> (PairedSummary, BTreeMap<String, Vec<f64>>) {
    let mut diffs = Vec::new();
    for p in 0..n_pairs {
        let acc = |s| runs.iter().find(|r| r.pair_id == p && r.shortcut == s).and_then(|r| r.final_acc);
        if let (Some(a), Some(c)) = (acc(Shortcut::Add), acc(Shortcut::Concat)) {
            diffs.push(c - a);
        }
    }
    let mut cdf = BTreeMap::new();
    for s in [Shortcut::Add, Shortcut::Concat] {
        let mut v: Vec<f64> = runs.iter().filter(|r| r.shortcut == s).filter_map(|r| r.final_acc).collect();
        v.sort_by(f64::total_cmp);
        cdf.insert(s.name().to_string(), v);
    }
    (
        PairedSummary {
            schema: SUMMARY_SCHEMA.into(),
            n_pairs,
            master_seed,
            add: kind_stats(runs, Shortcut::Add),
            concat: kind_stats(runs, Shortcut::Concat),
            sign_test: sign_test(&diffs),
        },
        cdf,
    )
}

/// Training configuration for one run of a pair.
pub fn run_config(spec: &RandSpec, base: &TrainConfig, pair: &SampledPair, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.drop_path_rate = 0.0;
    if std::mem::discriminant(&cfg.optimizer) != std::mem::discriminant(&spec.optimizer) {
        cfg.optimizer = spec.optimizer;
    }
    if let Some(a) = &pair.augment {
        cfg.jitter_magnitude = a.jitter_magnitude;
        cfg.mixup_alpha = a.mixup_alpha;
        cfg.cutmix_alpha = a.cutmix_alpha;
        cfg.random_erase_prob = a.random_erase_prob;
    }
    cfg
}

/// Worker cap from `DENSECAT_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DENSECAT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains `n_pairs` add networks and `n_pairs` concat networks. Each run
/// owns a seed derived from (master_seed, pair, shortcut), so results do not
/// depend on how runs are scheduled across `threads` workers.
pub fn run_paired_experiment(
    spec: &RandSpec,
    budget: &Budget,
    n_pairs: usize,
    train_cfg: &TrainConfig,
    dataset: &DatasetHandle,
    master_seed: u64,
    threads: usize,
) -> Result<PairedResult> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be ≥ 1".into()));
    }
    train_cfg.validate()?;
    let train_set = load_dataset(&dataset.with_split(Split::Train))?;
    let eval_set = load_dataset(&dataset.with_split(Split::Test))?;
    if train_set.classes != spec.num_classes {
        return Err(Error::Config(format!(
            "spec has {} classes, dataset {}",
            spec.num_classes, train_set.classes
        )));
    }
    let pairs = (0..n_pairs)
        .map(|p| sample_pair(spec, budget, derive_seed(master_seed, p, SAMPLE_STREAM)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Shortcut)> = (0..n_pairs)
        .flat_map(|p| [(p, Shortcut::Add), (p, Shortcut::Concat)])
        .collect();
    let run_one = |&(p, s): &(usize, Shortcut)| -> Result<RunRecord> {
        let net = pairs[p].get(s);
        let seed = derive_seed(master_seed, p, run_stream(s));
        let graph = build_randnet(&net.config)?;
        let cfg = run_config(spec, train_cfg, &pairs[p], seed);
        let out = train(&graph, &train_set, &eval_set, &cfg)?;
        let failed = out.summary.status == RunStatus::Failed;
        Ok(RunRecord {
            pair_id: p,
            shortcut: s,
            seed,
            config_hash: net.config_hash.clone(),
            params: net.costs.params,
            macs: net.costs.macs,
            final_acc: if failed { None } else { out.summary.final_eval_acc },
            epochs: out.summary.epochs_completed,
            failed,
            curve: out.summary.curve.iter().map(|r| r.eval_acc).collect(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut runs = pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;
    runs.sort_by_key(|r| (r.pair_id, r.shortcut));
    let (summary, cdf) = summarize(&runs, n_pairs, master_seed);
    Ok(PairedResult {
        runs,
        pairs,
        summary,
        cdf,
    })
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(String::new, |v| v.to_string())
}

impl PairedResult {
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("pair_id,shortcut,seed,params,macs,final_acc,epochs,failed,config_hash\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.pair_id,
                r.shortcut.name(),
                r.seed,
                r.params,
                r.macs,
                fmt_acc(r.final_acc),
                r.epochs,
                r.failed,
                r.config_hash
            ));
        }
        s
    }

    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("shortcut,rank,final_acc,cum_prob\n");
        for (kind, accs) in &self.cdf {
            for (i, a) in accs.iter().enumerate() {
                s.push_str(&format!("{kind},{},{a},{}\n", i + 1, (i + 1) as f64 / accs.len() as f64));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> RandSpec {
        RandSpec {
            depth: [1, 3],
            widths: vec![8, 16],
            growth_rates: vec![4, 8],
            kernels: vec![1, 3],
            norms: vec![NormChoice::Batch, NormChoice::Layer],
            input_size: 8,
            ..RandSpec::space(SpaceId::A)
        }
    }

    fn loose() -> Budget {
        Budget {
            max_params: u64::MAX,
            max_macs: u64::MAX,
            max_activation_bytes: u64::MAX,
        }
    }

    #[test]
    fn block_widths() {
        let g = build_randnet_block(RandBlockKind::PostNormNoAct, Shortcut::Add, 32, 32, 3, Activation::Relu, NormChoice::Batch).unwrap();
        assert_eq!(g.channels()[g.output], 32);
        let g = build_randnet_block(RandBlockKind::PreNorm, Shortcut::Concat, 32, 16, 3, Activation::Gelu, NormChoice::Layer).unwrap();
        assert_eq!(g.channels()[g.output], 48);
        assert!(build_randnet_block(RandBlockKind::PreNorm, Shortcut::Add, 32, 16, 3, Activation::Relu, NormChoice::Batch).is_err());
    }

    #[test]
    fn post_norm_variants_differ_by_one_activation() {
        let a = build_randnet_block(RandBlockKind::PostNorm, Shortcut::Add, 8, 8, 3, Activation::Silu, NormChoice::Batch).unwrap();
        let b = build_randnet_block(RandBlockKind::PostNormNoAct, Shortcut::Add, 8, 8, 3, Activation::Silu, NormChoice::Batch).unwrap();
        assert_eq!(a.nodes.len(), b.nodes.len() + 1);
        assert_eq!(&a.nodes[..b.nodes.len()], &b.nodes[..]);
        assert_eq!(a.nodes.last().unwrap().kind.op_name(), "activation");
    }

    #[test]
    fn sampling_is_deterministic_and_paired() {
        let spec = RandSpec::space(SpaceId::C);
        let budget = Budget {
            max_params: 200_000,
            max_macs: 200_000_000,
            max_activation_bytes: 4_000_000,
        };
        let a = sample_pair(&spec, &budget, 17).unwrap();
        let b = sample_pair(&spec, &budget, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.add.config.depth, a.concat.config.depth);
        assert_eq!(a.add.config.kernel, a.concat.config.kernel);
        assert_eq!(a.add.config.activation, a.concat.config.activation);
        assert_eq!(a.add.config.norm, a.concat.config.norm);
        assert!(budget.admits(&a.add.costs) && budget.admits(&a.concat.costs));
        let n = sample_network(&spec, Shortcut::Concat, &budget, 17).unwrap();
        assert_eq!(n.config_hash, a.concat.config_hash);
    }

    #[test]
    fn unsatisfiable_budget_names_cap() {
        let budget = Budget {
            max_params: 10,
            ..loose()
        };
        let msg = sample_pair(&tiny_spec(), &budget, 0).unwrap_err().to_string();
        assert!(msg.contains("max_params"), "{msg}");
    }

    #[test]
    fn acceptance_rate_matches_enumeration() {
        let spec = tiny_spec();
        let all = enumerate_choices(&spec);
        let cost = |c: &Choices| -> (Costs, Costs) {
            let f = |s| randnet_costs(&build_randnet(&config_for(&spec, c, s, 0.0)).unwrap(), spec.input_size).unwrap();
            (f(Shortcut::Add), f(Shortcut::Concat))
        };
        let costs: Vec<(Costs, Costs)> = all.iter().map(cost).collect();
        let mut ps: Vec<u64> = costs.iter().map(|(a, _)| a.params).collect();
        ps.sort();
        let budget = Budget {
            max_params: ps[ps.len() / 2],
            ..loose()
        };
        let admitted: Vec<bool> = costs.iter().map(|(a, c)| budget.admits(a) && budget.admits(c)).collect();
        let rate = admitted.iter().filter(|&&b| b).count() as f64 / all.len() as f64;
        let mean_params = costs
            .iter()
            .zip(&admitted)
            .filter(|(_, &ok)| ok)
            .map(|((a, _), _)| a.params as f64)
            .sum::<f64>()
            / admitted.iter().filter(|&&b| b).count() as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1000;
        let mut hits = 0usize;
        let mut sum = 0.0;
        for _ in 0..draws {
            let c = sample_choices(&spec, &mut rng);
            let (a, k) = cost(&c);
            if budget.admits(&a) && budget.admits(&k) {
                hits += 1;
                sum += a.params as f64;
            }
        }
        let observed = hits as f64 / draws as f64;
        let sigma = (rate * (1.0 - rate) / draws as f64).sqrt();
        assert!((observed - rate).abs() < 4.0 * sigma, "{observed} vs {rate}");
        let sampled_mean = sum / hits as f64;
        assert!((sampled_mean - mean_params).abs() / mean_params < 0.05, "{sampled_mean} vs {mean_params}");
    }

    #[test]
    fn sign_test_values() {
        let t = sign_test(&[1.0, 1.0, 1.0]);
        assert_eq!((t.wins, t.losses), (3, 0));
        assert!((t.p_value - 0.125).abs() < 1e-12);
        let t = sign_test(&[1.0, -1.0, 0.0]);
        assert_eq!(t.ties, 1);
        assert!((t.p_value - 0.75).abs() < 1e-12);
        // 20 of 30: Σ_{k≥20} C(30,k)/2^30
        let mut d = vec![1.0; 20];
        d.extend(vec![-1.0; 10]);
        let t = sign_test(&d);
        assert!((t.p_value - 0.049_368_573_352_694_51).abs() < 1e-9, "{}", t.p_value);
    }

    #[test]
    fn spaces_validate() {
        for id in [SpaceId::A, SpaceId::B, SpaceId::C, SpaceId::D, SpaceId::E] {
            RandSpec::space(id).validate().unwrap();
        }
        let mut e = RandSpec::space(SpaceId::E);
        e.optimizer = OptimizerConfig::sgd();
        assert!(e.validate().is_err());
    }
}
