//! Batch augmentations on N×C×H×W images with soft N×K labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("mixing alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(beta.sample(rng))
}

fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn check_batch(x: &Tensor<f32>, y: &Tensor<f32>, perm: &[usize]) -> Result<[usize; 4]> {
    let d = x.dims4("augment")?;
    if y.rank() != 2 || y.shape()[0] != d[0] || perm.len() != d[0] {
        return Err(Error::InvalidArgument(format!(
            "augment: labels {:?} / permutation of {} do not match batch {:?}",
            y.shape(),
            perm.len(),
            x.shape()
        )));
    }
    Ok(d)
}

/// Label rows become `w_keep·y + w_other·y[perm]` with `w_keep + w_other = 1`.
fn mix_labels(y: &Tensor<f32>, perm: &[usize], w_keep: f32, w_other: f32) -> Tensor<f32> {
    let k = y.shape()[1];
    let src = y.data();
    let mut out = y.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(k).enumerate() {
        let other = &src[perm[i] * k..(perm[i] + 1) * k];
        for (v, &o) in row.iter_mut().zip(other) {
            *v = w_keep * *v + w_other * o;
        }
    }
    out
}

/// Mixup with a given `lambda` and pairing `perm`.
pub fn mixup_with(x: &Tensor<f32>, y: &Tensor<f32>, lambda: f64, perm: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [n, c, h, w] = check_batch(x, y, perm)?;
    let keep = lambda as f32;
    let other = 1.0 - keep;
    let per = c * h * w;
    let src = x.data();
    let mut out = x.clone();
    for (i, img) in out.data_mut().chunks_exact_mut(per).enumerate().take(n) {
        let o = &src[perm[i] * per..(perm[i] + 1) * per];
        for (v, &b) in img.iter_mut().zip(o) {
            *v = keep * *v + other * b;
        }
    }
    Ok((out, mix_labels(y, perm, keep, other)))
}

/// λ ~ Beta(α, α); images and labels mixed with a random partner.
pub fn mixup<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let lambda = sample_lambda(alpha, rng)?;
    let perm = permutation(x.shape()[0], rng);
    mixup_with(x, y, lambda, &perm)
}

/// Half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Box of side `⌊√(1−λ)·side⌋` around a uniform centre, clipped to the image.
pub fn cutmix_box<R: Rng + ?Sized>(lambda: f64, h: usize, w: usize, rng: &mut R) -> CutBox {
    let r = (1.0 - lambda).max(0.0).sqrt();
    let ch = (h as f64 * r) as usize;
    let cw = (w as f64 * r) as usize;
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    CutBox {
        y0: cy.saturating_sub(ch / 2),
        y1: (cy + ch / 2).min(h),
        x0: cx.saturating_sub(cw / 2),
        x1: (cx + cw / 2).min(w),
    }
}

/// Pastes `cut` from the partner image; label weight of the partner is the
/// pasted area fraction.
pub fn cutmix_with(x: &Tensor<f32>, y: &Tensor<f32>, cut: CutBox, perm: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [n, c, h, w] = check_batch(x, y, perm)?;
    if cut.y0 > cut.y1 || cut.x0 > cut.x1 || cut.y1 > h || cut.x1 > w {
        return Err(Error::InvalidArgument(format!("cutmix box {cut:?} outside {h}×{w}")));
    }
    let src = x.data();
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            for yy in cut.y0..cut.y1 {
                let dst = ((i * c + ch) * h + yy) * w;
                let from = ((perm[i] * c + ch) * h + yy) * w;
                data[dst + cut.x0..dst + cut.x1].copy_from_slice(&src[from + cut.x0..from + cut.x1]);
            }
        }
    }
    let other = cutmix_weight(cut.area(), h * w);
    Ok((out, mix_labels(y, perm, 1.0 - other, other)))
}

/// Label weight of the pasted partner for `area` of `total` pixels.
pub fn cutmix_weight(area: usize, total: usize) -> f32 {
    (area as f64 / total as f64) as f32
}

pub fn cutmix<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let lambda = sample_lambda(alpha, rng)?;
    let [n, _, h, w] = x.dims4("cutmix")?;
    let cut = cutmix_box(lambda, h, w, rng);
    let perm = permutation(n, rng);
    cutmix_with(x, y, cut, &perm)
}

pub const ERASE_AREA: (f64, f64) = (0.02, 0.33);
/// Aspect ratios are log-uniform in [1/2, 2], so every sampled box fits.
pub const ERASE_ASPECT: (f64, f64) = (0.5, 2.0);

/// Rectangle erased from one H×W image.
pub fn erase_box<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> CutBox {
    let area = rng.gen_range(ERASE_AREA.0..ERASE_AREA.1) * (h * w) as f64;
    let log_ar = rng.gen_range(ERASE_ASPECT.0.ln()..ERASE_ASPECT.1.ln());
    let ar = log_ar.exp();
    let eh = ((area * ar).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / ar).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - eh);
    let x0 = rng.gen_range(0..=w - ew);
    CutBox {
        y0,
        y1: y0 + eh,
        x0,
        x1: x0 + ew,
    }
}

/// With probability `prob` per image, overwrites one rectangle (all channels)
/// with standard normal noise. Returns the boxes applied.
pub fn random_erase<R: Rng + ?Sized>(x: &mut Tensor<f32>, prob: f64, rng: &mut R) -> Result<Vec<Option<CutBox>>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("erase probability {prob} outside [0, 1]")));
    }
    let [n, c, h, w] = x.dims4("random_erase")?;
    let mut boxes = Vec::with_capacity(n);
    let data = x.data_mut();
    for i in 0..n {
        if prob == 0.0 || rng.gen::<f64>() >= prob {
            boxes.push(None);
            continue;
        }
        let b = erase_box(h, w, rng);
        for ch in 0..c {
            for yy in b.y0..b.y1 {
                let row = ((i * c + ch) * h + yy) * w;
                for v in &mut data[row + b.x0..row + b.x1] {
                    *v = StandardNormal.sample(rng);
                }
            }
        }
        boxes.push(Some(b));
    }
    Ok(boxes)
}

/// A reduced photometric policy standing in for RandAugment: two of
/// {brightness, contrast, saturation, invert} per image at strength
/// `magnitude`/10. It is not a faithful RandAugment.
pub fn color_jitter<R: Rng + ?Sized>(x: &mut Tensor<f32>, magnitude: f64, rng: &mut R) -> Result<()> {
    if !(0.0..=10.0).contains(&magnitude) {
        return Err(Error::InvalidArgument(format!("jitter magnitude {magnitude} outside [0, 10]")));
    }
    let [n, c, h, w] = x.dims4("color_jitter")?;
    let s = (magnitude / 10.0) as f32;
    let plane = h * w;
    let data = x.data_mut();
    for i in 0..n {
        let img = &mut data[i * c * plane..(i + 1) * c * plane];
        for _ in 0..2 {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            match rng.gen_range(0..4) {
                0 => img.iter_mut().for_each(|v| *v += sign * s),
                1 => {
                    let mean = img.iter().sum::<f32>() / img.len() as f32;
                    let f = 1.0 + sign * 0.5 * s;
                    img.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
                }
                2 => {
                    let f = 1.0 + sign * 0.5 * s;
                    for p in 0..plane {
                        let grey = (0..c).map(|ch| img[ch * plane + p]).sum::<f32>() / c as f32;
                        for ch in 0..c {
                            let v = &mut img[ch * plane + p];
                            *v = grey + f * (*v - grey);
                        }
                    }
                }
                _ => {
                    if rng.gen::<f64>() < 0.5 * magnitude / 10.0 {
                        img.iter_mut().for_each(|v| *v = -*v);
                    }
                }
            }
        }
    }
    Ok(())
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} ≥ class count {classes}")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::from_vec(vec![labels.len(), classes], data)
}
