//! Average, max and global-average pooling.

use serde::{Deserialize, Serialize};

use super::conv::output_extent;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Pooled output plus, for max pooling, the flat input index of each winner.
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn pool<T: Real>(x: &Tensor<T>, spec: PoolSpec) -> Result<Pooled<T>> {
    let [n, c, h, w] = x.dims4("pool")?;
    if spec.stride == 0 || spec.kernel == 0 {
        return Err(Error::shape("pool", "kernel and stride must be at least 1"));
    }
    if spec.kind == PoolKind::Avg && spec.pad != 0 {
        return Err(Error::shape("pool", "average pooling does not take padding"));
    }
    let too_big = || {
        Error::shape(
            "pool",
            format!(
                "kernel {} larger than padded input {}×{} (pad {})",
                spec.kernel, h, w, spec.pad
            ),
        )
    };
    let oh = output_extent(h, spec.kernel, spec.stride, spec.pad).ok_or_else(too_big)?;
    let ow = output_extent(w, spec.kernel, spec.stride, spec.pad).ok_or_else(too_big)?;
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    let inv = T::one() / T::from_usize(spec.kernel * spec.kernel).unwrap();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..spec.kernel {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..spec.kernel {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = src[idx];
                        acc = acc + v;
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                match spec.kind {
                    PoolKind::Avg => out.push(acc * inv),
                    PoolKind::Max => {
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(vec![n, c, oh, ow], out)?,
        argmax,
    })
}

pub fn pool_backward<T: Real>(
    input_shape: &[usize],
    spec: PoolSpec,
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let numel: usize = input_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    match spec.kind {
        PoolKind::Max => {
            for (&idx, &u) in argmax.iter().zip(dy.data()) {
                dx[idx] = dx[idx] + u;
            }
        }
        PoolKind::Avg => {
            let (h, w) = (input_shape[2], input_shape[3]);
            let [_, _, oh, ow] = dy.dims4("pool backward")?;
            let inv = T::one() / T::from_usize(spec.kernel * spec.kernel).unwrap();
            for (plane, up) in dy.data().chunks_exact(oh * ow).enumerate() {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = up[oy * ow + ox] * inv;
                        for ki in 0..spec.kernel {
                            let row = base + (oy * spec.stride + ki) * w + ox * spec.stride;
                            for kj in 0..spec.kernel {
                                dx[row + kj] = dx[row + kj] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), dx)
}

/// Spatial mean: N×C×H×W → N×C×1×1.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let p = h * w;
    let inv = T::one() / T::from_usize(p).unwrap();
    let data = x
        .data()
        .chunks_exact(p)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(vec![n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let p = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &u in dy.data() {
        dx.extend(std::iter::repeat_n(u * inv, p));
    }
    Tensor::from_vec(input_shape.to_vec(), dx).expect("pool grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn avg_two_by_two() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = PoolSpec { kind: PoolKind::Avg, kernel: 2, stride: 2, pad: 0 };
        assert_eq!(pool(&x, spec).unwrap().output.data(), &[2.5]);
    }

    #[test]
    fn global_avg_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.25);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|v| (*v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn max_pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let spec = PoolSpec { kind: PoolKind::Max, kernel: 3, stride: 2, pad: 1 };
        let y = pool(&x, spec).unwrap().output;
        let (oh, ow) = (4, 3);
        assert_eq!(y.shape(), &[2, 3, oh, ow]);
        for plane in 0..6 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for iy in (oy * 2).saturating_sub(1)..(oy * 2 + 2).min(7) {
                        for ix in (ox * 2).saturating_sub(1)..(ox * 2 + 2).min(6) {
                            best = best.max(x.data()[plane * 42 + iy * 6 + ix]);
                        }
                    }
                    assert_eq!(y.data()[(plane * oh + oy) * ow + ox], best);
                }
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_errors() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let spec = PoolSpec { kind: PoolKind::Avg, kernel: 3, stride: 1, pad: 0 };
        assert!(pool(&x, spec).is_err());
    }
}
