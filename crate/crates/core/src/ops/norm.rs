//! Layer normalization over channels and batch normalization over (N, H, W).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Values kept from the forward pass of either normalization.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// Reciprocal standard deviations: one per (n, position) for layer norm,
    /// one per channel for batch norm.
    pub rstd: Vec<T>,
}

fn check_affine<T: Real>(
    op: &'static str,
    c: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "affine parameters {:?}/{:?} do not match C={c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("{op}: eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// Normalizes across channels independently at every (n, h, w) position.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [n, c, h, w] = x.dims4("layer_norm")?;
    check_affine("layer_norm", c, gamma, beta, eps)?;
    let p = h * w;
    let eps = T::from_f64_lossy(eps);
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let src = x.data();
    let mut y = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = vec![T::zero(); n * p];
    let mut mean = vec![T::zero(); p];
    let mut var = vec![T::zero(); p];
    for b in 0..n {
        let base = b * c * p;
        mean.fill(T::zero());
        var.fill(T::zero());
        for ch in 0..c {
            let plane = &src[base + ch * p..base + (ch + 1) * p];
            for (m, &v) in mean.iter_mut().zip(plane) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        for ch in 0..c {
            let plane = &src[base + ch * p..base + (ch + 1) * p];
            for ((s, &v), &m) in var.iter_mut().zip(plane).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let r = &mut rstd[b * p..(b + 1) * p];
        for (r, &s) in r.iter_mut().zip(&var) {
            *r = T::one() / (s * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
            let off = base + ch * p;
            for i in 0..p {
                let xh = (src[off + i] - mean[i]) * r[i];
                xhat[off + i] = xh;
                y[off + i] = xh * gv + bv;
            }
        }
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), y)?, NormCache { xhat, rstd }))
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let up = dy.data();
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); up.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_d = vec![T::zero(); p];
    let mut sum_dx = vec![T::zero(); p];
    for b in 0..n {
        let base = b * c * p;
        sum_d.fill(T::zero());
        sum_dx.fill(T::zero());
        for ch in 0..c {
            let gv = gamma.data()[ch];
            let off = base + ch * p;
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..p {
                let u = up[off + i];
                let xh = cache.xhat[off + i];
                dg = dg + u * xh;
                db = db + u;
                let d = u * gv;
                sum_d[i] = sum_d[i] + d;
                sum_dx[i] = sum_dx[i] + d * xh;
            }
            dgamma[ch] = dgamma[ch] + dg;
            dbeta[ch] = dbeta[ch] + db;
        }
        let r = &cache.rstd[b * p..(b + 1) * p];
        for ch in 0..c {
            let gv = gamma.data()[ch];
            let off = base + ch * p;
            for i in 0..p {
                let d = up[off + i] * gv;
                dx[off + i] =
                    r[i] * (d - sum_d[i] * inv_c - cache.xhat[off + i] * sum_dx[i] * inv_c);
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(shape.to_vec(), dx)?,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics from a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

/// Batch normalization. In train mode statistics come from the batch; in eval
/// mode from `running_mean`/`running_var`.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
    mode: NormMode,
) -> Result<(Tensor<T>, NormCache<T>, Option<BatchStats<T>>)> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    check_affine("batch_norm", c, gamma, beta, eps)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batch_norm", "running statistics length differs from C"));
    }
    let p = h * w;
    let m = n * p;
    if mode == NormMode::Train && n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_norm in train mode needs a batch of at least 2, got N={n}"
        )));
    }
    let src = x.data();
    let eps_t = T::from_f64_lossy(eps);
    let mut y = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = vec![T::zero(); c];
    let mut stats = BatchStats {
        mean: vec![T::zero(); c],
        var_unbiased: vec![T::zero(); c],
    };
    for ch in 0..c {
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    s = s + src[off..off + p].iter().copied().sum::<T>();
                }
                let mean = s / T::from_usize(m).unwrap();
                let mut ss = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    for &v in &src[off..off + p] {
                        ss = ss + (v - mean) * (v - mean);
                    }
                }
                stats.mean[ch] = mean;
                stats.var_unbiased[ch] = ss / T::from_usize(m - 1).unwrap();
                (mean, ss / T::from_usize(m).unwrap())
            }
            NormMode::Eval => (running_mean[ch], running_var[ch]),
        };
        let r = T::one() / (var + eps_t).sqrt();
        rstd[ch] = r;
        let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let xh = (src[i] - mean) * r;
                xhat[i] = xh;
                y[i] = xh * gv + bv;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), y)?,
        NormCache { xhat, rstd },
        (mode == NormMode::Train).then_some(stats),
    ))
}

pub fn batch_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    mode: NormMode,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_usize(n * p).unwrap();
    let up = dy.data();
    let mut dx = vec![T::zero(); up.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let gv = gamma.data()[ch];
        let r = cache.rstd[ch];
        let mut db = T::zero();
        let mut dg = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                db = db + up[i];
                dg = dg + up[i] * cache.xhat[i];
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                dx[i] = match mode {
                    NormMode::Train => gv * r / m * (m * up[i] - db - cache.xhat[i] * dg),
                    NormMode::Eval => up[i] * gv * r,
                };
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(shape.to_vec(), dx)?,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], 5.0);
        let (y, _) = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let beta = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::zeros(&[3]), &beta, 1e-6).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 4) % 3]);
        }
    }

    #[test]
    fn layer_norm_matches_per_position_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 8, 2, 2], 2.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for b in 0..2 {
            for pos in 0..4 {
                let vals: Vec<f64> = (0..8).map(|c| x.data()[(b * 8 + c) * 4 + pos]).collect();
                let mean = vals.iter().sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                for c in 0..8 {
                    let want = (vals[c] - mean) / (var + 1e-6).sqrt() * gamma.data()[c]
                        + beta.data()[c];
                    assert!((y.data()[(b * 8 + c) * 4 + pos] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 1]);
        assert!(layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let (y, _, stats) = batch_norm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &[0.0; 3],
            &[1.0; 3],
            1e-12,
            NormMode::Eval,
        )
        .unwrap();
        assert!(stats.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[4, 3, 3, 3], 3.0, &mut rng);
        let (y, _, stats) = batch_norm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &[0.0; 3],
            &[1.0; 3],
            1e-12,
            NormMode::Train,
        )
        .unwrap();
        assert!(stats.is_some());
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 9..(b * 3 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_train_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(&[3, 2, 2, 2], 1.5);
        let (y, _, _) = batch_norm(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &[0.0; 2],
            &[1.0; 2],
            1e-5,
            NormMode::Train,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let err = batch_norm(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &[0.0; 2],
            &[1.0; 2],
            1e-5,
            NormMode::Train,
        );
        assert!(err.is_err());
    }
}
