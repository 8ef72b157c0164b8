//! SGD with momentum and AdamW, as slice kernels plus a stateful wrapper over
//! a [`ParamStore`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModuleGraph, ParamStore};
use crate::tensor::{Real, Tensor};

fn check_finite<T: Real>(name: &str, what: &str, xs: &[T]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} of parameter {name}")))
    }
}

/// `v ← m·v + g + wd·w; w ← w − lr·v`.
pub fn sgd_step<T: Real>(
    name: &str,
    w: &mut [T],
    g: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_finite(name, "gradient", g)?;
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *w;
        *w = *w - lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update at step `step` (≥ 1): decoupled decay
/// `w ← w·(1 − lr·wd)` first, then the bias-corrected adaptive step.
pub fn adamw_step<T: Real>(
    name: &str,
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    h: AdamHyper,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("adamw step counter starts at 1".into()));
    }
    check_finite(name, "gradient", g)?;
    check_finite(name, "first moment", m)?;
    check_finite(name, "second moment", v)?;
    let t = step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let decay = T::from_f64_lossy(1.0 - h.lr * h.weight_decay);
    let (b1, b2) = (T::from_f64_lossy(h.beta1), T::from_f64_lossy(h.beta2));
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let (lr, eps) = (T::from_f64_lossy(h.lr), T::from_f64_lossy(h.eps));
    let one = T::one();
    for i in 0..w.len() {
        w[i] = w[i] * decay;
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adamw { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

/// Optimizer state for every tensor of a [`ParamStore`]. Weight decay applies
/// to tensors of rank ≥ 2 only (biases, norm affines and gains are exempt).
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub weight_decay: f64,
    step: u64,
    names: Vec<Vec<String>>,
    first: Vec<Vec<Vec<T>>>,
    second: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, weight_decay: f64, graph: &ModuleGraph, params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<Vec<T>>> {
            params
                .tensors
                .iter()
                .map(|slots| slots.iter().map(|t| vec![T::zero(); t.numel()]).collect())
                .collect()
        };
        let names = graph
            .nodes
            .iter()
            .map(|n| {
                n.kind
                    .param_shapes()
                    .iter()
                    .map(|(p, _)| format!("{}.{p}", n.name))
                    .collect()
            })
            .collect();
        let second = match config {
            OptimizerConfig::Adamw { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            config,
            weight_decay,
            step: 0,
            names,
            first: zeros(),
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` is aligned with `params.tensors`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<Tensor<T>>], lr: f64) -> Result<()> {
        self.step += 1;
        for (i, slots) in params.tensors.iter_mut().enumerate() {
            for (j, slot) in slots.iter_mut().enumerate() {
                let g = grads[i][j].data();
                let wd = if slot.rank() >= 2 { self.weight_decay } else { 0.0 };
                let name = &self.names[i][j];
                let w = Arc::make_mut(slot).data_mut();
                match self.config {
                    OptimizerConfig::Sgd { momentum } => {
                        sgd_step(name, w, g, &mut self.first[i][j], lr, momentum, wd)?
                    }
                    OptimizerConfig::Adamw { beta1, beta2, eps } => adamw_step(
                        name,
                        w,
                        g,
                        &mut self.first[i][j],
                        &mut self.second[i][j],
                        self.step,
                        AdamHyper {
                            lr,
                            beta1,
                            beta2,
                            eps,
                            weight_decay: wd,
                        },
                    )?,
                }
            }
        }
        Ok(())
    }
}
