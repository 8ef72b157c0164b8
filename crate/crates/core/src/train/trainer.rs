//! The training loop and its run summary.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{color_jitter, cutmix, mixup, one_hot, random_erase};
use super::data::Dataset;
use super::optim::{Optimizer, OptimizerConfig};
use super::schedule::cosine_lr;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{forward, Mode, ModuleGraph, NodeKind, ParamStore};
use crate::tensor::Tensor;

pub const RUN_SCHEMA: &str = "densecat.run/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub random_erase_prob: f64,
    /// Strength (0–10) of the photometric stand-in for RandAugment; 0 disables it.
    pub jitter_magnitude: f64,
    /// When > 0, overrides the rate of every drop-path site in the graph.
    pub drop_path_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adamw(),
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 64,
            eval_batch_size: 256,
            label_smoothing: 0.1,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            random_erase_prob: 0.0,
            jitter_magnitude: 0.0,
            drop_path_rate: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            if self.warmup_epochs != 0 {
                bad.push("warmup_epochs must be 0 when epochs is 0".to_string());
            }
        } else if self.warmup_epochs >= self.epochs {
            bad.push(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            bad.push("batch sizes must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bad.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..=1.0).contains(&self.random_erase_prob) {
            bad.push(format!("random_erase_prob {} outside [0, 1]", self.random_erase_prob));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            bad.push(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            bad.push("mixing alphas must be ≥ 0 (0 disables)".to_string());
        }
        if !(0.0..=10.0).contains(&self.jitter_magnitude) {
            bad.push(format!("jitter_magnitude {} outside [0, 10]", self.jitter_magnitude));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0) {
            bad.push("learning rates must be ≥ 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub seed: u64,
    pub params: u64,
    pub epochs: usize,
    pub epochs_completed: usize,
    pub steps: u64,
    pub first_batch_loss: Option<f64>,
    /// Accuracy of the freshly initialized model; only measured for 0-epoch runs.
    pub initial_eval_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_eval_acc: Option<f64>,
    pub curve: Vec<EpochRecord>,
}

impl RunSummary {
    /// `epoch,train_loss,eval_acc` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_acc\n");
        for r in &self.curve {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.eval_acc));
        }
        s
    }
}

pub struct TrainOutcome {
    pub summary: RunSummary,
    pub graph: ModuleGraph,
    pub params: ParamStore<f32>,
}

fn output_classes(graph: &ModuleGraph, shape: [usize; 3]) -> Result<usize> {
    let shapes = graph.infer_shapes([1, shape[0], shape[1], shape[2]])?;
    let out = &shapes[graph.output];
    if out.len() != 2 {
        return Err(Error::Architecture(format!("graph output {out:?} is not N×K logits")));
    }
    Ok(out[1])
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(graph: &ModuleGraph, params: &mut ParamStore<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let mut tape = Tape::inference();
        let input = tape.constant(x);
        let pass = forward(graph, params, &mut tape, input, Mode::Eval, None, &[])?;
        let logits = tape.value(pass.output);
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Applies `rate` to every drop-path site; errors if there are none.
pub fn with_drop_path(graph: &ModuleGraph, rate: f64) -> Result<ModuleGraph> {
    let mut g = graph.clone();
    let mut sites = 0;
    for node in &mut g.nodes {
        if let NodeKind::DropPath { rate: r } = &mut node.kind {
            *r = rate;
            sites += 1;
        }
    }
    if sites == 0 {
        return Err(Error::Config(
            "drop_path_rate > 0 but the graph has no drop-path sites; build the model with a drop-path rate".into(),
        ));
    }
    Ok(g)
}

fn augment_batch(
    x: Tensor<f32>,
    y: Tensor<f32>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut x, y) = match (cfg.mixup_alpha > 0.0, cfg.cutmix_alpha > 0.0) {
        (true, true) => {
            if rng.gen::<bool>() {
                mixup(&x, &y, cfg.mixup_alpha, rng)?
            } else {
                cutmix(&x, &y, cfg.cutmix_alpha, rng)?
            }
        }
        (true, false) => mixup(&x, &y, cfg.mixup_alpha, rng)?,
        (false, true) => cutmix(&x, &y, cfg.cutmix_alpha, rng)?,
        (false, false) => (x, y),
    };
    if cfg.jitter_magnitude > 0.0 {
        color_jitter(&mut x, cfg.jitter_magnitude, rng)?;
    }
    if cfg.random_erase_prob > 0.0 {
        random_erase(&mut x, cfg.random_erase_prob, rng)?;
    }
    Ok((x, y))
}

/// Trains a freshly initialized copy of `graph`. Batches of fewer than two
/// examples are skipped (batch norm needs two). A non-finite loss or gradient
/// ends the run with `status = failed`; the summary is still returned.
pub fn train(graph: &ModuleGraph, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = output_classes(graph, train_set.shape)?;
    if classes != train_set.classes || eval_set.classes != train_set.classes {
        return Err(Error::Config(format!(
            "model predicts {classes} classes; datasets have {} / {}",
            train_set.classes, eval_set.classes
        )));
    }
    let graph = if cfg.drop_path_rate > 0.0 {
        with_drop_path(graph, cfg.drop_path_rate)?
    } else {
        graph.clone()
    };
    let mut params = ParamStore::<f32>::init(&graph, cfg.seed);
    let mut optim = Optimizer::new(cfg.optimizer, cfg.weight_decay, &graph, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64_6f6d_6e65);
    let bs = cfg.batch_size;
    let n = train_set.len();
    let steps_per_epoch = (n / bs + usize::from(n % bs >= 2)) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;

    let mut summary = RunSummary {
        schema: RUN_SCHEMA.into(),
        status: RunStatus::Ok,
        failure: None,
        seed: cfg.seed,
        params: graph.param_count(),
        epochs: cfg.epochs,
        epochs_completed: 0,
        steps: 0,
        first_batch_loss: None,
        initial_eval_acc: None,
        final_train_loss: None,
        final_eval_acc: None,
        curve: Vec::new(),
    };
    if cfg.epochs == 0 {
        let acc = evaluate(&graph, &mut params, eval_set, cfg.eval_batch_size)?;
        summary.initial_eval_acc = Some(acc);
        summary.final_eval_acc = Some(acc);
    }

    'epochs: for epoch in 0..cfg.epochs {
        let order = train_set.epoch_order(cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train_set.batch(chunk)?;
            let y = one_hot(&labels, classes)?;
            let (x, y) = augment_batch(x, y, cfg, &mut rng)?;
            let grads = {
                let mut tape = Tape::new();
                let input = tape.constant(x);
                let pass = forward(
                    &graph,
                    &mut params,
                    &mut tape,
                    input,
                    Mode::Train,
                    Some(&mut rng as &mut dyn RngCore),
                    &[],
                )?;
                let loss = tape.softmax_cross_entropy(pass.output, &y, cfg.label_smoothing)?;
                let value = tape.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    summary.status = RunStatus::Failed;
                    summary.failure = Some(format!("non-finite loss at epoch {epoch}, step {}", summary.steps));
                    break 'epochs;
                }
                summary.first_batch_loss.get_or_insert(value);
                loss_sum += value;
                batches += 1;
                let mut g = tape.backward(loss)?;
                pass.params
                    .iter()
                    .map(|slots| slots.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            let lr = cosine_lr(summary.steps, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr);
            match optim.step(&mut params, &grads, lr) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    summary.status = RunStatus::Failed;
                    summary.failure = Some(format!("non-finite {what} at epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            summary.steps += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let eval_acc = evaluate(&graph, &mut params, eval_set, cfg.eval_batch_size)?;
        summary.curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            eval_acc,
        });
        summary.epochs_completed = epoch + 1;
        summary.final_train_loss = Some(train_loss);
        summary.final_eval_acc = Some(eval_acc);
    }
    Ok(TrainOutcome {
        summary,
        graph,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ArchMeta, GraphBuilder};
    use crate::train::data::{synthetic_blobs, Split};

    fn linear_probe(classes: usize) -> ModuleGraph {
        let mut b = GraphBuilder::new(3);
        let p = b.push("pool", NodeKind::GlobalAvgPool, &[0]).unwrap();
        let f = b.push("flat", NodeKind::Flatten, &[p]).unwrap();
        let fc = b
            .push(
                "fc",
                NodeKind::Linear {
                    in_features: 3,
                    out_features: classes,
                    bias: true,
                },
                &[f],
            )
            .unwrap();
        b.finish(fc, ArchMeta::default()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_epochs_reports_initial_accuracy() {
        let d = synthetic_blobs(3, 8, 30, 1, 1.0, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&linear_probe(3), &d, &d, &cfg).unwrap();
        assert!(out.summary.curve.is_empty());
        assert!(out.summary.initial_eval_acc.is_some());
        assert_eq!(out.summary.curves_csv(), "epoch,train_loss,eval_acc\n");
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let d = synthetic_blobs(3, 8, 30, 1, 1.0, Split::Train).unwrap();
        assert!(train(&linear_probe(4), &d, &d, &TrainConfig::default()).is_err());
    }

    #[test]
    fn drop_path_needs_sites() {
        assert!(with_drop_path(&linear_probe(2), 0.1).is_err());
    }
}
