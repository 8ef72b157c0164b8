//! Fully connected layer, soft-target cross entropy and channel re-scaling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 2]> {
    match t.shape()[..] {
        [a, b] => Ok([a, b]),
        _ => Err(Error::shape(op, format!("expected a rank-2 tensor, got {:?}", t.shape()))),
    }
}

/// `x · w + b` with x: N×D, w: D×K, b: K.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, d] = dims2("linear", x)?;
    let [wd, k] = dims2("linear", w)?;
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("inner dimensions differ: input D={d}, weight rows={wd}"),
        ));
    }
    let mut out = vec![T::zero(); n * k];
    if let Some(b) = b {
        if b.shape() != [k] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} does not match K={k}", b.shape()),
            ));
        }
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(n, d, k, x.data(), d as isize, 1, w.data(), k as isize, 1, T::one(), &mut out, k as isize, 1);
    Tensor::from_vec(vec![n, k], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let [n, d] = dims2("linear backward", x)?;
    let k = w.shape()[1];
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, dy.data(), k as isize, 1, w.data(), 1, k as isize, T::zero(), &mut dx, d as isize, 1);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, n, k, x.data(), 1, d as isize, dy.data(), k as isize, 1, T::zero(), &mut dw, k as isize, 1);
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); k];
        for row in dy.data().chunks_exact(k) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        Tensor::from_vec(vec![k], db).expect("bias grad shape")
    });
    Ok(LinearGrads {
        input: Tensor::from_vec(vec![n, d], dx)?,
        weight: Tensor::from_vec(vec![d, k], dw)?,
        bias: db,
    })
}

/// Forward state of the soft-target cross entropy.
#[derive(Clone, Debug)]
pub struct CrossEntropyCache<T> {
    pub probs: Vec<T>,
    pub targets: Vec<T>,
    pub batch: usize,
}

/// Mean over the batch of −Σ t'·log softmax(logits), with
/// t' = (1 − smoothing)·t + smoothing/K.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    label_smoothing: f64,
) -> Result<(T, CrossEntropyCache<T>)> {
    let [n, k] = dims2("softmax_cross_entropy", logits)?;
    if targets.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape()),
        ));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing must lie in [0, 1), got {label_smoothing}"
        )));
    }
    let eps = T::from_f64_lossy(label_smoothing);
    let uniform = eps / T::from_usize(k).unwrap();
    let keep = T::one() - eps;
    let mut probs = vec![T::zero(); n * k];
    let mut smoothed = vec![T::zero(); n * k];
    let mut total = T::zero();
    for row in 0..n {
        let z = &logits.data()[row * k..(row + 1) * k];
        let t = &targets.data()[row * k..(row + 1) * k];
        let sum_t: f64 = t.iter().map(|v| v.to_f64().unwrap()).sum();
        if (sum_t - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "target row {row} sums to {sum_t}, expected 1"
            )));
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let log_norm = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let mut loss = T::zero();
        for j in 0..k {
            let ts = keep * t[j] + uniform;
            let logp = z[j] - log_norm;
            probs[row * k + j] = logp.exp();
            smoothed[row * k + j] = ts;
            loss = loss - ts * logp;
        }
        total = total + loss;
    }
    Ok((
        total / T::from_usize(n).unwrap(),
        CrossEntropyCache {
            probs,
            targets: smoothed,
            batch: n,
        },
    ))
}

pub fn softmax_cross_entropy_backward<T: Real>(
    shape: &[usize],
    cache: &CrossEntropyCache<T>,
    dloss: T,
) -> Tensor<T> {
    let scale = dloss / T::from_usize(cache.batch).unwrap();
    let data = cache
        .probs
        .iter()
        .zip(&cache.targets)
        .map(|(&p, &t)| (p - t) * scale)
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("logit grad shape")
}

/// Saved intermediates of [`channel_rescale`].
#[derive(Clone, Debug)]
pub struct RescaleCache<T> {
    /// Spatial means, N×C.
    pub pooled: Vec<T>,
    /// Sigmoid gates, N×C.
    pub gate: Vec<T>,
}

/// `x ⊙ gamma ⊙ sigmoid(se_weight · mean_hw(x) + se_bias)`, per sample and channel.
pub fn channel_rescale<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    se_weight: &Tensor<T>,
    se_bias: &Tensor<T>,
) -> Result<(Tensor<T>, RescaleCache<T>)> {
    let [n, c, h, w] = x.dims4("channel_rescale")?;
    if gamma.shape() != [c] || se_bias.shape() != [c] || se_weight.shape() != [c, c] {
        return Err(Error::shape(
            "channel_rescale",
            format!(
                "gamma {:?}, se_weight {:?}, se_bias {:?} do not fit C={c}",
                gamma.shape(),
                se_weight.shape(),
                se_bias.shape()
            ),
        ));
    }
    let p = h * w;
    let inv = T::one() / T::from_usize(p).unwrap();
    let pooled: Vec<T> = x
        .data()
        .chunks_exact(p)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    let mut gate = vec![T::zero(); n * c];
    for b in 0..n {
        let v = &pooled[b * c..(b + 1) * c];
        for ch in 0..c {
            let row = &se_weight.data()[ch * c..(ch + 1) * c];
            let z = row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>() + se_bias.data()[ch];
            gate[b * c + ch] = T::one() / (T::one() + (-z).exp());
        }
    }
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_exact_mut(p).enumerate() {
        let s = gamma.data()[i % c] * gate[i];
        plane.iter_mut().for_each(|v| *v = *v * s);
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, RescaleCache { pooled, gate }))
}

pub struct RescaleGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub se_weight: Tensor<T>,
    pub se_bias: Tensor<T>,
}

pub fn channel_rescale_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    se_weight: &Tensor<T>,
    cache: &RescaleCache<T>,
    dy: &Tensor<T>,
) -> Result<RescaleGrads<T>> {
    let [n, c, h, w] = x.dims4("channel_rescale backward")?;
    let p = h * w;
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dz = vec![T::zero(); n * c];
    for (i, (xp, up)) in x.data().chunks_exact(p).zip(dy.data().chunks_exact(p)).enumerate() {
        let ch = i % c;
        let s: T = xp.iter().zip(up).map(|(&a, &b)| a * b).sum();
        let g = cache.gate[i];
        dgamma[ch] = dgamma[ch] + s * g;
        dz[i] = s * gamma.data()[ch] * g * (T::one() - g);
    }
    let mut dse_w = vec![T::zero(); c * c];
    let mut dse_b = vec![T::zero(); c];
    let mut dpooled = vec![T::zero(); n * c];
    for b in 0..n {
        let v = &cache.pooled[b * c..(b + 1) * c];
        for ch in 0..c {
            let d = dz[b * c + ch];
            dse_b[ch] = dse_b[ch] + d;
            let row = &se_weight.data()[ch * c..(ch + 1) * c];
            for j in 0..c {
                dse_w[ch * c + j] = dse_w[ch * c + j] + d * v[j];
                dpooled[b * c + j] = dpooled[b * c + j] + row[j] * d;
            }
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    for (i, (dp, up)) in dx.chunks_exact_mut(p).zip(dy.data().chunks_exact(p)).enumerate() {
        let s = gamma.data()[i % c] * cache.gate[i];
        let add = dpooled[i] * inv;
        for (d, &u) in dp.iter_mut().zip(up) {
            *d = u * s + add;
        }
    }
    Ok(RescaleGrads {
        input: Tensor::from_vec(x.shape().to_vec(), dx)?,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        se_weight: Tensor::from_vec(vec![c, c], dse_w)?,
        se_bias: Tensor::from_vec(vec![c], dse_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(n: usize, k: usize, labels: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, k]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[i * k + l] = 1.0;
        }
        t
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[4]))).unwrap(), x);
        let b = Tensor::full(&[2], 0.75);
        let y = linear(&x, &Tensor::zeros(&[4, 2]), Some(&b)).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.75));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = b.data()[j];
                for k in 0..7 {
                    acc += x.data()[i * 7 + k] * w.data()[k * 3 + j];
                }
                assert!((y.data()[i * 3 + j] - acc).abs() < 1e-6);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[6, 3]), None).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[2, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(2, 10, &[3, 7]), 0.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_equal_to_softmax_gives_entropy() {
        let z = [0.3f64, -1.2, 2.0, 0.1];
        let m = z.iter().map(|v| v.exp()).sum::<f64>();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / m).collect();
        let logits = Tensor::from_vec(vec![1, 4], z.to_vec()).unwrap();
        let targets = Tensor::from_vec(vec![1, 4], p.clone()).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &targets, 0.0).unwrap();
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn smoothing_decomposes_into_two_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::randn(&[4, 10], 2.0, &mut rng);
        let hard = one_hot(4, 10, &[0, 9, 4, 4]);
        let uniform = Tensor::full(&[4, 10], 0.1);
        let (smoothed, _) = softmax_cross_entropy(&logits, &hard, 0.1).unwrap();
        let (ce_hard, _) = softmax_cross_entropy(&logits, &hard, 0.0).unwrap();
        let (ce_uniform, _) = softmax_cross_entropy(&logits, &uniform, 0.0).unwrap();
        assert!((smoothed - (0.9 * ce_hard + 0.1 * ce_uniform)).abs() < 1e-6);
    }

    #[test]
    fn unnormalized_targets_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let t = Tensor::from_vec(vec![1, 3], vec![0.5, 0.4, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &t, 0.0).is_err());
    }

    #[test]
    fn rescale_resting_gate_with_gamma_two_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let (y, _) = channel_rescale(
            &x,
            &Tensor::full(&[3], 2.0),
            &Tensor::zeros(&[3, 3]),
            &Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(y, x);
        let (z, _) =
            channel_rescale(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3]))
                .unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rescale_matches_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c, p) = (2, 4, 6);
        let x = Tensor::<f64>::randn(&[n, c, 2, 3], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[c], 1.0, &mut rng);
        let wse = Tensor::<f64>::randn(&[c, c], 1.0, &mut rng);
        let bse = Tensor::<f64>::randn(&[c], 1.0, &mut rng);
        let (y, _) = channel_rescale(&x, &gamma, &wse, &bse).unwrap();
        for b in 0..n {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| x.data()[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>() / p as f64)
                .collect();
            for ch in 0..c {
                let z: f64 = (0..c).map(|j| wse.data()[ch * c + j] * pooled[j]).sum::<f64>()
                    + bse.data()[ch];
                let gate = 1.0 / (1.0 + (-z).exp());
                for i in 0..p {
                    let idx = (b * c + ch) * p + i;
                    let want = x.data()[idx] * gamma.data()[ch] * gate;
                    assert!((y.data()[idx] - want).abs() < 1e-6);
                }
            }
        }
    }
}
