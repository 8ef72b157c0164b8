//! 2-D convolution (cross-correlation, zero padding), dense and grouped.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec { stride, pad, groups }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }
}

/// Output spatial extent of a convolution or pooling window.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

fn geometry<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Geometry> {
    let [n, cin, h, w] = x.dims4("conv2d")?;
    let [cout, wc, kh, kw] = match weight.shape()[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be Cout×Cin/g×kh×kw, got {:?}", weight.shape()),
            ))
        }
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input channels Cin={cin} not divisible by groups={g}"),
        ));
    }
    if cout % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output channels Cout={cout} not divisible by groups={g}"),
        ));
    }
    if wc != cin / g {
        return Err(Error::shape(
            "conv2d",
            format!("weight dim 1 is {wc} but Cin/groups = {}", cin / g),
        ));
    }
    if spec.stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    let oh = output_extent(h, kh, spec.stride, spec.pad).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("height H={h} with pad {} smaller than kernel kh={kh}", spec.pad),
        )
    })?;
    let ow = output_extent(w, kw, spec.stride, spec.pad).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("width W={w} with pad {} smaller than kernel kw={kw}", spec.pad),
        )
    })?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match Cout={cout}", b.shape()),
            ));
        }
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        cin_g: cin / g,
        cout_g: cout / g,
        spec,
    })
}

/// Unfolds one group of one sample into a (cin_g·kh·kw) × (oh·ow) matrix.
fn im2col<T: Real>(src: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.oh * g.ow;
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    for c in 0..g.cin_g {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto the input plane, accumulating overlaps.
fn col2im<T: Real>(col: &[T], g: &Geometry, dst: &mut [T]) {
    let p = g.oh * g.ow;
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    for c in 0..g.cin_g {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, bias, spec)?;
    let p = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    if g.depthwise() {
        depthwise_forward(x.data(), weight.data(), &g, &mut out);
    } else {
        let k = g.patch_len();
        let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..g.n {
            for grp in 0..g.spec.groups {
                let src_off = (b * g.cin + grp * g.cin_g) * g.h * g.w;
                let src = &x.data()[src_off..src_off + g.cin_g * g.h * g.w];
                let cols: &[T] = if g.pointwise() {
                    src
                } else {
                    im2col(src, &g, &mut col);
                    &col
                };
                let w_off = grp * g.cout_g * k;
                let dst_off = (b * g.cout + grp * g.cout_g) * p;
                T::gemm(
                    g.cout_g,
                    k,
                    p,
                    &weight.data()[w_off..w_off + g.cout_g * k],
                    k as isize,
                    1,
                    cols,
                    p as isize,
                    1,
                    T::zero(),
                    &mut out[dst_off..dst_off + g.cout_g * p],
                    p as isize,
                    1,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for plane in out.chunks_exact_mut(p).enumerate() {
            let (i, plane) = plane;
            let bv = bias.data()[i % g.cout];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::from_vec(vec![g.n, g.cout, g.oh, g.ow], out)
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    let (hw, p) = (g.h * g.w, g.oh * g.ow);
    for b in 0..g.n {
        for c in 0..g.cin {
            let src = &x[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
            let dst = &mut out[(b * g.cout + c) * p..(b * g.cout + c + 1) * p];
            let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kern[ki * g.kw + kj];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, o) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *o = *o + wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: ConvSpec,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, weight, None, spec)?;
    let p = g.oh * g.ow;
    if dy.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d backward",
            format!("upstream gradient shape {:?}", dy.shape()),
        ));
    }
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weight.numel()];
    if g.depthwise() {
        depthwise_backward(x.data(), weight.data(), dy.data(), &g, &mut dx, &mut dw);
    } else {
        let k = g.patch_len();
        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for b in 0..g.n {
            for grp in 0..g.spec.groups {
                let src_off = (b * g.cin + grp * g.cin_g) * g.h * g.w;
                let src = &x.data()[src_off..src_off + g.cin_g * g.h * g.w];
                let dy_off = (b * g.cout + grp * g.cout_g) * p;
                let dyg = &dy.data()[dy_off..dy_off + g.cout_g * p];
                let w_off = grp * g.cout_g * k;
                let cols: &[T] = if g.pointwise() {
                    src
                } else {
                    im2col(src, &g, &mut col);
                    &col
                };
                // dW_g += dY_g · colᵀ
                T::gemm(
                    g.cout_g,
                    p,
                    k,
                    dyg,
                    p as isize,
                    1,
                    cols,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw[w_off..w_off + g.cout_g * k],
                    k as isize,
                    1,
                );
                // dcol = W_gᵀ · dY_g
                let wg = &weight.data()[w_off..w_off + g.cout_g * k];
                let dst = &mut dx[src_off..src_off + g.cin_g * g.h * g.w];
                if g.pointwise() {
                    T::gemm(
                        k, g.cout_g, p, wg, 1, k as isize, dyg, p as isize, 1, T::one(), dst,
                        p as isize, 1,
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        wg,
                        1,
                        k as isize,
                        dyg,
                        p as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        p as isize,
                        1,
                    );
                    col2im(&dcol, &g, dst);
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for (i, plane) in dy.data().chunks_exact(p).enumerate() {
            let s: T = plane.iter().copied().sum();
            db[i % g.cout] = db[i % g.cout] + s;
        }
        Tensor::from_vec(vec![g.cout], db).expect("bias grad shape")
    });
    Ok(ConvGrads {
        input: Tensor::from_vec(x.shape().to_vec(), dx)?,
        weight: Tensor::from_vec(weight.shape().to_vec(), dw)?,
        bias: db,
    })
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Geometry,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    let (hw, p, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for b in 0..g.n {
        for c in 0..g.cin {
            let src = &x[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
            let dsrc = &mut dx[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
            let up = &dy[(b * g.cout + c) * p..(b * g.cout + c + 1) * p];
            let kern = &w[c * kk..(c + 1) * kk];
            let dkern = &mut dw[c * kk..(c + 1) * kk];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kern[ki * g.kw + kj];
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = iy as usize * g.w;
                        for ox in 0..g.ow {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                let u = up[oy * g.ow + ox];
                                acc = acc + u * src[row + ix as usize];
                                dsrc[row + ix as usize] = dsrc[row + ix as usize] + wv * u;
                            }
                        }
                    }
                    dkern[ki * g.kw + kj] = dkern[ki * g.kw + kj] + acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: ConvSpec) -> Vec<f64> {
        let [n, cin, h, wd] = x.dims4("t").unwrap();
        let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * s.pad - kh) / s.stride + 1;
        let ow = (wd + 2 * s.pad - kw) / s.stride + 1;
        let og = cout / s.groups;
        let mut out = vec![0.0; n * cout * oh * ow];
        for bi in 0..n {
            for co in 0..cout {
                let grp = co / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cg {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                                    let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let c = grp * cg + ci;
                                    acc += x.data()[((bi * cin + c) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((co * cg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let spec = ConvSpec::new(1, 1, 1);
        let y = conv2d(&x, &w, None, spec).unwrap();
        let r = naive(&x, &w, None, spec);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn grouped_strided_and_depthwise_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (cin, cout, groups, k, stride, pad) in
            [(4, 6, 2, 3, 2, 1), (6, 6, 6, 7, 1, 3), (4, 8, 4, 3, 2, 0), (3, 5, 1, 4, 4, 0)]
        {
            let x = Tensor::<f64>::randn(&[2, cin, 9, 8], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[cout, cin / groups, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[cout], 1.0, &mut rng);
            let spec = ConvSpec::new(stride, pad, groups);
            let y = conv2d(&x, &w, Some(&b), spec).unwrap();
            let r = naive(&x, &w, Some(&b), spec);
            assert_eq!(y.numel(), r.len());
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[2, 5, 3, 3], 1.0, &mut rng);
        let w = Tensor::<f32>::ones(&[5, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 0, 5)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::<f32>::ones(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::ones(&[4, 3, 3, 3]);
        let err = conv2d(&x, &w, None, ConvSpec::new(1, 0, 2)).unwrap_err();
        assert!(err.to_string().contains("Cin=3"), "{err}");
        let w = Tensor::<f32>::ones(&[4, 3, 5, 5]);
        let err = conv2d(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("kh=5"), "{err}");
        let w = Tensor::<f32>::ones(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("weight dim 1"), "{err}");
    }
}
