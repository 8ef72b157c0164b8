//! Central finite-difference verification of backward kernels, in double precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::ops::norm::NormMode;
use crate::ops::pointwise::Activation;
use crate::ops::pool::{PoolKind, PoolSpec};
use crate::tensor::Tensor;

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;
type KinkFn = Box<dyn Fn(&[Tensor<f64>], f64) -> bool + Send + Sync>;

/// One operation (or composite) under test: a graph over some random inputs.
pub struct OpUnderTest {
    pub name: String,
    pub input_shapes: Vec<Vec<usize>>,
    /// Maximum relative error accepted for this op.
    pub tolerance: f64,
    build: BuildFn,
    near_kink: Option<KinkFn>,
}

impl OpUnderTest {
    pub fn new(
        name: impl Into<String>,
        input_shapes: Vec<Vec<usize>>,
        tolerance: f64,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        OpUnderTest {
            name: name.into(),
            input_shapes,
            tolerance,
            build: Box::new(build),
            near_kink: None,
        }
    }

    /// Marks inputs for which the op is not differentiable within `h`; such
    /// samples are redrawn.
    pub fn with_kink(
        mut self,
        near_kink: impl Fn(&[Tensor<f64>], f64) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.near_kink = Some(Box::new(near_kink));
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub resamples: usize,
}

const MAX_RESAMPLES: usize = 20;

/// Floor of the relative-error denominator, as a fraction of the largest
/// analytic gradient entry of the op. Central differences carry roundoff of
/// roughly ε·|loss|/h in absolute terms, which would otherwise dominate the
/// relative error of entries many orders below the gradient's scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// |analytic − numeric| / max(|analytic|, |numeric|, floor), where `floor`
/// never drops below 1e-6.
pub fn derivative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor.max(1e-6))
}

fn projected_loss(op: &OpUnderTest, inputs: &[Tensor<f64>], probe: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (op.build)(&mut tape, &vars)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(probe.iter().flat_map(|p| p.data()))
        .map(|(a, b)| a * b)
        .sum())
}

/// Compares backward gradients of `op` with central differences
/// (f(x+h) − f(x−h)) / 2h on every input coordinate.
///
/// The scalar being differentiated is Σ out ⊙ R for a fixed random R, so every
/// output element contributes. `fault` multiplies the analytic gradient and
/// exists to exercise the failure path; pass 1.0 otherwise.
pub fn grad_check_with_fault(
    op: &OpUnderTest,
    seed: u64,
    h: f64,
    fault: f64,
) -> Result<GradCheckOutcome> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resamples = 0;
    let inputs = loop {
        let inputs: Vec<Tensor<f64>> = op
            .input_shapes
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        match &op.near_kink {
            Some(kink) if kink(&inputs, h) => {
                resamples += 1;
                if resamples > MAX_RESAMPLES {
                    return Err(Error::Numerical(format!(
                        "{}: every sampled input lies near a non-differentiable point",
                        op.name
                    )));
                }
            }
            _ => break inputs,
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(Arc::new(t.clone()))).collect();
    let out = (op.build)(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let probe = Tensor::randn(&out_shape, 1.0, &mut rng);
    let r = tape.constant(probe.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;
    let probe = [probe];

    let mut pairs = Vec::new();
    let mut perturbed = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + h;
            let up = projected_loss(op, &perturbed, &probe)?;
            perturbed[i].data_mut()[j] = x0 - h;
            let down = projected_loss(op, &perturbed, &probe)?;
            perturbed[i].data_mut()[j] = x0;
            pairs.push((analytic.data()[j] * fault, (up - down) / (2.0 * h)));
        }
    }
    let floor = SCALE_FLOOR * pairs.iter().fold(0.0f64, |m, p| m.max(p.0.abs()));
    let worst = pairs
        .iter()
        .map(|&(a, n)| derivative_error(a, n, floor))
        .fold(0.0f64, f64::max);
    Ok(GradCheckOutcome {
        max_rel_error: worst,
        resamples,
    })
}

pub fn grad_check(op: &OpUnderTest, seed: u64, h: f64) -> Result<GradCheckOutcome> {
    grad_check_with_fault(op, seed, h, 1.0)
}

fn near_zero(t: &[Tensor<f64>], h: f64) -> bool {
    t[0].data().iter().any(|v| v.abs() < 10.0 * h)
}

fn near_tie(t: &[Tensor<f64>], h: f64) -> bool {
    let mut v = t[0].data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.windows(2).any(|w| w[1] - w[0] < 10.0 * h)
}

/// Fixed soft targets: row i puts weight on classes i and i+1.
fn soft_targets(rows: usize, k: usize) -> Tensor<f64> {
    let mut data = vec![0.0; rows * k];
    for i in 0..rows {
        data[i * k + i % k] = 0.7;
        data[i * k + (i + 1) % k] += 0.3;
    }
    Tensor::from_vec(vec![rows, k], data).expect("valid target shape")
}

/// The primitive ops of the engine, with their acceptance tolerances.
pub fn standard_ops() -> Vec<OpUnderTest> {
    let mut ops = vec![
        OpUnderTest::new("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], 1e-4, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 1))
        }),
        OpUnderTest::new(
            "conv2d_strided_grouped",
            vec![vec![2, 4, 6, 6], vec![4, 2, 2, 2]],
            1e-4,
            |t, v| t.conv2d(v[0], v[1], None, ConvSpec::new(2, 0, 2)),
        ),
        OpUnderTest::new(
            "depthwise_conv2d_7x7",
            vec![vec![1, 3, 8, 8], vec![3, 1, 7, 7], vec![3]],
            1e-4,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 3, 3)),
        ),
        OpUnderTest::new("concat_channels", vec![vec![2, 2, 3, 3], vec![2, 1, 3, 3]], 1e-4, |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        OpUnderTest::new("add", vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]], 1e-4, |t, v| {
            t.add(v[0], v[1])
        }),
        OpUnderTest::new(
            "layer_norm",
            vec![vec![2, 6, 3, 3], vec![6], vec![6]],
            1e-4,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        OpUnderTest::new(
            "batch_norm_train",
            vec![vec![3, 4, 2, 2], vec![4], vec![4]],
            1e-4,
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &[0.0; 4], &[1.0; 4], 1e-5, NormMode::Train)?;
                Ok(y)
            },
        ),
        OpUnderTest::new(
            "batch_norm_eval",
            vec![vec![2, 4, 2, 2], vec![4], vec![4]],
            1e-4,
            |t, v| {
                let (y, _) = t.batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    &[0.1, -0.2, 0.3, 0.0],
                    &[1.5, 0.5, 2.0, 1.0],
                    1e-5,
                    NormMode::Eval,
                )?;
                Ok(y)
            },
        ),
        OpUnderTest::new("relu", vec![vec![2, 3, 3, 3]], 1e-4, |t, v| {
            Ok(t.activation(v[0], Activation::Relu))
        })
        .with_kink(near_zero),
        OpUnderTest::new("gelu", vec![vec![2, 3, 3, 3]], 1e-4, |t, v| {
            Ok(t.activation(v[0], Activation::Gelu))
        }),
        OpUnderTest::new("silu", vec![vec![2, 3, 3, 3]], 1e-4, |t, v| {
            Ok(t.activation(v[0], Activation::Silu))
        }),
        OpUnderTest::new("avg_pool", vec![vec![2, 2, 4, 6]], 1e-4, |t, v| {
            t.pool(v[0], PoolSpec { kind: PoolKind::Avg, kernel: 2, stride: 2, pad: 0 })
        }),
        OpUnderTest::new("max_pool", vec![vec![1, 2, 5, 5]], 1e-4, |t, v| {
            t.pool(v[0], PoolSpec { kind: PoolKind::Max, kernel: 3, stride: 2, pad: 1 })
        })
        .with_kink(near_tie),
        OpUnderTest::new("global_avg_pool", vec![vec![2, 3, 3, 4]], 1e-4, |t, v| {
            t.global_avg_pool(v[0])
        }),
        OpUnderTest::new("linear", vec![vec![4, 5], vec![5, 3], vec![3]], 1e-4, |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        OpUnderTest::new(
            "softmax_cross_entropy",
            vec![vec![3, 5]],
            1e-4,
            |t, v| t.softmax_cross_entropy(v[0], &soft_targets(3, 5), 0.1),
        ),
        OpUnderTest::new(
            "channel_rescale",
            vec![vec![2, 3, 3, 3], vec![3], vec![3, 3], vec![3]],
            1e-4,
            |t, v| t.channel_rescale(v[0], v[1], v[2], v[3]),
        ),
        OpUnderTest::new("drop_path_scale", vec![vec![3, 2, 2, 2]], 1e-4, |t, v| {
            t.scale_samples(v[0], vec![1.25, 0.0, 1.25])
        }),
    ];
    ops.push(crate::blocks::micro_model_op());
    ops
}

/// Seed for the check of a named op.
pub fn check_seed(base: u64, name: &str) -> u64 {
    name.bytes().fold(base ^ 0x9e37_79b9_7f4a_7c15, |acc, b| {
        (acc ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    })
}

/// Runs every standard op; returns (name, outcome, tolerance) rows.
pub fn check_all(seed: u64, h: f64, fault: f64) -> Vec<(String, Result<GradCheckOutcome>, f64)> {
    standard_ops()
        .into_iter()
        .map(|op| {
            let out = grad_check_with_fault(&op, check_seed(seed, &op.name), h, fault);
            (op.name.clone(), out, op.tolerance)
        })
        .collect()
}

/// Convenience for callers that need a fresh random tensor in tests.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: f64 = rng.gen_range(0.5..1.5);
    Tensor::randn(shape, scale, &mut rng)
}
