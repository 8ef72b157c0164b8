//! Elementwise maps, channel concatenation and per-sample scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Relu, Activation::Gelu, Activation::Silu];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}

/// Applies `kind` to one value. GELU uses the exact x·Φ(x) form.
pub fn activate<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => x * std_normal_cdf(x),
        Activation::Silu => x * sigmoid(x),
    }
}

/// Derivative of `activate(kind, x)` with respect to `x`.
pub fn activate_grad<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
        Activation::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = x.data().iter().map(|&v| activate(kind, v)).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

pub fn activation_backward<T: Real>(x: &Tensor<T>, kind: Activation, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &u)| u * activate_grad(kind, v))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis, in input order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty input list"))?;
    let [n, _, h, w] = first.dims4("concat_channels")?;
    let mut total = 0;
    for (i, x) in xs.iter().enumerate() {
        let [xn, xc, xh, xw] = x.dims4("concat_channels")?;
        if xn != n || xh != h || xw != w {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "input {i} has N×H×W = {xn}×{xh}×{xw}, expected {n}×{h}×{w}"
                ),
            ));
        }
        total += xc;
    }
    let p = h * w;
    let mut data = Vec::with_capacity(n * total * p);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * p..(b + 1) * c * p]);
        }
    }
    Tensor::from_vec(vec![n, total, h, w], data)
}

/// Splits an upstream gradient into per-input channel blocks.
pub fn split_channels<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        out.push(dy.channel_slice(start, c)?);
        start += c;
    }
    Ok(out)
}

/// Multiplies every element of sample `n` by `factors[n]`.
pub fn scale_samples<T: Real>(x: &Tensor<T>, factors: &[T]) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    if factors.len() != n {
        return Err(Error::shape(
            "scale_samples",
            format!("{} factors for batch of {n}", factors.len()),
        ));
    }
    let per = x.numel() / n;
    let mut data = x.data().to_vec();
    for (chunk, &f) in data.chunks_exact_mut(per).zip(factors) {
        chunk.iter_mut().for_each(|v| *v = *v * f);
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}
