//! Learning-rate schedule.

use std::f64::consts::PI;

/// Linear warmup for `t < warmup` (reaching `lr_max` at `t = warmup − 1`),
/// then cosine decay from `lr_max` at `t = warmup` to `lr_min` at `t = total`.
pub fn cosine_lr(t: u64, total: u64, warmup: u64, lr_max: f64, lr_min: f64) -> f64 {
    if t < warmup {
        return lr_max * (t + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return lr_max;
    }
    let progress = (t.min(total) - warmup) as f64 / span as f64;
    if progress == 1.0 {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(5, 105, 5, 1e-3, 1e-5), 1e-3);
        assert_eq!(cosine_lr(105, 105, 5, 1e-3, 1e-5), 1e-5);
        let mid = cosine_lr(55, 105, 5, 1e-3, 1e-5);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        assert_eq!(cosine_lr(0, 100, 4, 0.4, 0.0), 0.1);
        assert_eq!(cosine_lr(3, 100, 4, 0.4, 0.0), 0.4);
        assert_eq!(cosine_lr(0, 100, 0, 0.4, 0.0), 0.4);
    }
}
